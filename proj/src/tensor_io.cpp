#include "physnet/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "physnet/errors.hpp"

namespace physnet {

namespace {

constexpr bool kLittleEndian = std::endian::native == std::endian::little;

std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
  nlohmann::json header;
  header["shape"] = tensor.shape();
  header["dtype"] = "f32";
  header["order"] = "row-major";
  out << header.dump() << '\n';
  const auto data = tensor.data();
  if constexpr (kLittleEndian) {
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  } else {
    for (float v : data) {
      const std::uint32_t bits = byteswap32(std::bit_cast<std::uint32_t>(v));
      out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
  if (!out) throw IoError("failed writing tensor payload");
}

Tensor read_tensor(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("missing tensor header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed tensor header: ") + e.what());
  }
  if (header.value("dtype", "") != "f32") throw IoError("unsupported tensor dtype: " + header.value("dtype", "?"));
  if (header.value("order", "") != "row-major") throw IoError("unsupported tensor order");
  if (!header.contains("shape") || !header["shape"].is_array()) throw IoError("tensor header lacks a shape");
  Shape shape = header["shape"].get<Shape>();
  for (auto d : shape) {
    if (d <= 0) throw IoError("tensor header has non-positive dimension");
  }
  std::vector<float> data(numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != data.size() * sizeof(float)) throw IoError("truncated tensor payload");
  if constexpr (!kLittleEndian) {
    for (auto& v : data) v = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(v)));
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ostringstream buffer(std::ios::binary);
  write_tensor(buffer, tensor);
  write_file_atomic(path, buffer.str());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor file " + path.string());
  return read_tensor(in);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    const auto msg = ec.message();
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " into place: " + msg);
  }
}

}  // namespace physnet
