#include "stdemand/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <string_view>

#include "stdemand/binary_io.hpp"

namespace stdemand {

void write_checkpoint(const Parameters<float>& params, std::ostream& out) {
  io::BinaryWriter w(out);
  w.magic("ICKP");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& t : params) {
    w.string16(t.name);
    w.put<std::uint8_t>(t.rank);
    if (t.rank == 1) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(t.value.size()));
    } else if (t.rank == 2) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(t.value.rows()));
      w.put<std::uint32_t>(static_cast<std::uint32_t>(t.value.cols()));
    } else {
      throw DataError("checkpoint tensors must have rank 1 or 2: " + t.name);
    }
    for (Eigen::Index i = 0; i < t.value.rows(); ++i)
      for (Eigen::Index j = 0; j < t.value.cols(); ++j) w.put<float>(t.value(i, j));
  }
  if (!w.ok()) throw DataError("failed writing checkpoint");
}

Parameters<float> read_checkpoint(std::istream& in) {
  io::BinaryReader r(in);
  r.expect_magic("ICKP");
  const auto version = r.get<std::uint32_t>();
  if (version != 1) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  Parameters<float> params;
  for (std::uint32_t k = 0; k < count; ++k) {
    auto name = r.string16();
    const auto rank = r.get<std::uint8_t>();
    Eigen::Index rows = 1;
    Eigen::Index cols = 1;
    if (rank == 1) {
      cols = r.get<std::uint32_t>();
    } else if (rank == 2) {
      rows = r.get<std::uint32_t>();
      cols = r.get<std::uint32_t>();
    } else {
      throw DataError("checkpoint tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    }
    auto& m = params.add(std::move(name), rows, cols, rank);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = r.get<float>();
  }
  r.expect_eof();
  return params;
}

void write_checkpoint(const Parameters<float>& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_checkpoint(params, out);
}

Parameters<float> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_checkpoint(in);
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".cfg";
  return p;
}

std::size_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  return std::hash<std::string_view>{}(bytes);
}

}  // namespace stdemand
