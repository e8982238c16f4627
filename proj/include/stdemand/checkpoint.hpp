#pragma once

#include <filesystem>
#include <iosfwd>

#include "stdemand/parameters.hpp"

namespace stdemand {

/// ICKP: magic, u32 version, u32 tensor count, then per tensor u16 name length, name, u8 rank, u32 dims, f32 data.
void write_checkpoint(const Parameters<float>& params, std::ostream& out);
Parameters<float> read_checkpoint(std::istream& in);
void write_checkpoint(const Parameters<float>& params, const std::filesystem::path& path);
Parameters<float> read_checkpoint(const std::filesystem::path& path);

/// Path of the key=value sidecar that accompanies a checkpoint.
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

/// Hash of a file's bytes, for verifying that inference left a checkpoint untouched.
std::size_t file_hash(const std::filesystem::path& path);

}  // namespace stdemand
