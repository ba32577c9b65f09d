#include "sklp/checkpoint.hpp"

#include "sklp/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sklp::model {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

void put_f32(std::string& out, float v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  float f32() {
    need(4);
    float v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ParamSet& params) {
  std::string out = "SKLP";
  put_u32(out, kCheckpointVersion);
  nlohmann::json header = to_json(params.config());
  header["param_version"] = params.version();
  const std::string js = header.dump();
  put_u32(out, static_cast<std::uint32_t>(js.size()));
  out += js;
  for (const auto& [name, t] : params.entries()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::uint32_t d : t.shape) put_u32(out, d);
    for (Eigen::Index i = 0; i < t.data.size(); ++i) put_f32(out, static_cast<float>(t.data.data()[i]));
  }
  return out;
}

ParamSet deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || bytes.compare(0, 4, "SKLP") != 0) throw FormatError("bad checkpoint magic");
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t js_len = r.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.take(js_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  ParamSet ps(config_from_json(header), header.value("param_version", std::int64_t{0}));
  while (!r.done()) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.take(name_len);
    const std::uint32_t rank = r.u32();
    if (rank < 1 || rank > 2) throw FormatError("parameter '" + name + "' has unsupported rank");
    std::vector<std::uint32_t> shape(rank);
    for (auto& d : shape) d = r.u32();
    Tensor t = make_tensor(shape);
    for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = r.f32();
    ps.insert(std::move(name), std::move(t));
  }
  return ps;
}

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint not found: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

ParamSet round_trip_f32(const ParamSet& params) { return deserialize_checkpoint(serialize_checkpoint(params)); }

}  // namespace sklp::model
