#include "stdemand/encodings.hpp"

#include <cmath>
#include <fstream>
#include <unordered_map>

#include "stdemand/binary_io.hpp"

namespace stdemand {

void EncodingTable::validate() const {
  if (static_cast<std::size_t>(values.rows()) != region_ids.size()) {
    throw DataError("encoding table row count does not match its id count");
  }
  if (!values.allFinite()) throw DataError("encoding table contains non-finite values");
}

EncodingTable EncodingTable::reorder(const std::vector<std::string>& ids) const {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < region_ids.size(); ++i) pos.emplace(region_ids[i], i);
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = pos.find(id);
    if (it == pos.end()) throw DataError("no encoding for region " + id);
    rows.push_back(it->second);
  }
  return select(rows);
}

EncodingTable EncodingTable::select(const std::vector<std::size_t>& rows) const {
  EncodingTable out;
  out.values.resize(static_cast<Eigen::Index>(rows.size()), values.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.region_ids.push_back(region_ids.at(rows[k]));
    out.values.row(static_cast<Eigen::Index>(k)) = values.row(static_cast<Eigen::Index>(rows[k]));
  }
  return out;
}

MatD ridge_init(const MatD& encodings, const MatD& target, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("ridge lambda must be positive");
  if (encodings.rows() != target.rows()) throw ConfigError("ridge: encoding and target row counts differ");
  MatD gram = encodings.transpose() * encodings;
  gram.diagonal().array() += lambda;
  const MatD rhs = encodings.transpose() * target;
  return gram.ldlt().solve(rhs);
}

void write_encodings(const EncodingTable& table, std::ostream& out) {
  table.validate();
  io::BinaryWriter w(out);
  w.magic("IEMB");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(table.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(table.dim()));
  for (const auto& id : table.region_ids) w.string16(id);
  for (Eigen::Index i = 0; i < table.values.rows(); ++i)
    for (Eigen::Index j = 0; j < table.values.cols(); ++j) w.put<float>(table.values(i, j));
  if (!w.ok()) throw DataError("failed writing encodings");
}

EncodingTable read_encodings(std::istream& in) {
  io::BinaryReader r(in);
  r.expect_magic("IEMB");
  const auto version = r.get<std::uint32_t>();
  if (version != 1) throw DataError("unsupported encoding file version " + std::to_string(version));
  const auto n = r.get<std::uint32_t>();
  const auto d = r.get<std::uint32_t>();
  EncodingTable table;
  table.region_ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) table.region_ids.push_back(r.string16());
  table.values.resize(n, d);
  for (Eigen::Index i = 0; i < table.values.rows(); ++i)
    for (Eigen::Index j = 0; j < table.values.cols(); ++j) table.values(i, j) = r.get<float>();
  r.expect_eof();
  table.validate();
  return table;
}

void write_encodings(const EncodingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_encodings(table, out);
}

EncodingTable read_encodings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_encodings(in);
}

}  // namespace stdemand
