#include "hmr/io.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hmr {

static_assert(std::endian::native == std::endian::little,
              "tensor blob format is little-endian; byte swapping is not implemented");

void write_tensor_blob(const std::string& path, const std::string& name, const Tensor& t) {
  nlohmann::json header;
  header["shape"] = t.shape();
  header["name"] = name;
  const std::string hs = header.dump();
  const std::uint64_t hlen = hs.size();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  if (!out) throw std::runtime_error("short write: " + path);
}

std::pair<std::string, Tensor> read_tensor_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated tensor blob header: " + path);

  const auto header = nlohmann::json::parse(hs);
  Shape shape = header.at("shape").get<Shape>();
  std::string name = header.at("name").get<std::string>();

  Array data(numel(shape));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(Scalar)));
  if (!in) throw std::runtime_error("truncated tensor blob payload: " + path);
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("short write: " + path);
}

}  // namespace hmr
