#include <cstring>
#include <fstream>

#include "json.hpp"
#include "vsr/errors.hpp"
#include "vsr/params.hpp"

namespace vsr {

namespace {

constexpr char kMagic[4] = {'V', 'S', 'R', '1'};

// Checkpoints are raw little-endian float64. On a big-endian host the blobs
// would need a byte swap; all supported targets are little-endian.
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

}  // namespace

void saveCheckpoint(const std::string& path, std::span<const Parameter> params) {
  nlohmann::json header = nlohmann::json::object();
  std::size_t offset = 0;
  for (const Parameter& p : params) {
    header[p.name] = {{"shape", p.tensor.shape()}, {"offset", offset}};
    offset += p.tensor.size() * sizeof(double);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  std::string headerStr = header.dump();
  out.write(headerStr.data(), static_cast<std::streamsize>(headerStr.size()));
  out.put('\n');
  for (const Parameter& p : params) {
    out.write(reinterpret_cast<const char*>(p.tensor.data()),
              static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

void loadCheckpoint(const std::string& path, std::span<Parameter> params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("'" + path + "' is not a VSR1 checkpoint");
  }
  std::string headerStr;
  if (!std::getline(in, headerStr)) throw ParseError("checkpoint header missing in '" + path + "'");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(headerStr);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint header unreadable: " + std::string(e.what()));
  }
  std::streampos blobStart = in.tellg();
  for (Parameter& p : params) {
    auto it = header.find(p.name);
    if (it == header.end()) {
      throw ParseError("checkpoint '" + path + "' has no parameter '" + p.name + "'");
    }
    Shape shape = (*it)["shape"].get<Shape>();
    if (shape != p.tensor.shape()) {
      throw ShapeError("checkpoint shape " + shapeToString(shape) + " for '" + p.name +
                       "' does not match model shape " + shapeToString(p.tensor.shape()));
    }
    std::size_t offset = (*it)["offset"].get<std::size_t>();
    in.seekg(blobStart + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(p.tensor.data()),
            static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
    if (!in) throw ParseError("checkpoint '" + path + "' truncated at '" + p.name + "'");
  }
}

}  // namespace vsr
