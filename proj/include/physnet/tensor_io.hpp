#pragma once

// Binary tensor records: one JSON header line
//   {"shape":[...],"dtype":"f32","order":"row-major"}\n
// followed by the little-endian float32 payload. A file may hold several
// records back to back (checkpoints do).

#include <filesystem>
#include <iosfwd>
#include <string>

#include "physnet/tensor.hpp"

namespace physnet {

void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

// Writes `contents` through a temporary sibling file and renames it into
// place, so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace physnet
