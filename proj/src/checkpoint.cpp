#include "checkpoint.hpp"

#include <cstring>

#include "util.hpp"

namespace seqctl {

static const char kMagic[4] = {'S', 'Q', 'C', 'K'};
static constexpr uint32_t kVersion = 1;

namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

void put_u64(std::string& out, uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t at = 0;

  void need(size_t n) {
    require(at + n <= buf.size(), Error::Kind::Format, "checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[at + b])) << (8 * b);
    at += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int b = 0; b < 8; ++b)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[at + b])) << (8 * b);
    at += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(at, n);
    at += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const std::string& manifest_json,
                     const nn::ParamStore& params) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u64(out, manifest_json.size());
  out += manifest_json;
  put_u32(out, static_cast<uint32_t>(params.params().size()));
  for (const auto& p : params.params()) {
    put_u32(out, static_cast<uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, static_cast<uint32_t>(p.rows));
    put_u32(out, static_cast<uint32_t>(p.cols));
    for (double w : p.w) put_f32(out, static_cast<float>(w));
  }
  put_u64(out, fnv1a(out));
  write_file(path, out);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::string buf = read_file(path);
  require(buf.size() >= 4 + 4 + 8 + 8, Error::Kind::Format,
          path + ": not a checkpoint (too short)");
  require(std::memcmp(buf.data(), kMagic, 4) == 0, Error::Kind::Format,
          path + ": not a checkpoint (bad magic)");
  uint64_t stored = 0;
  for (int b = 0; b < 8; ++b)
    stored |= static_cast<uint64_t>(
                  static_cast<unsigned char>(buf[buf.size() - 8 + b]))
              << (8 * b);
  require(stored == fnv1a(buf.data(), buf.size() - 8), Error::Kind::Format,
          path + ": checkpoint fingerprint mismatch");

  Reader r{buf, 4};
  uint32_t version = r.u32();
  require(version == kVersion, Error::Kind::Format,
          path + ": unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  data.manifest_json = r.bytes(r.u64());
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointData::Tensor t;
    t.name = r.bytes(r.u32());
    t.rows = static_cast<int>(r.u32());
    t.cols = static_cast<int>(r.u32());
    size_t n = static_cast<size_t>(t.rows) * t.cols;
    t.values.resize(n);
    for (size_t k = 0; k < n; ++k) t.values[k] = r.f32();
    data.tensors.push_back(std::move(t));
  }
  return data;
}

const CheckpointData::Tensor* CheckpointData::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void restore_params(const CheckpointData& data, nn::ParamStore& params) {
  for (auto& p : params.params()) {
    const auto* t = data.find(p.name);
    require(t != nullptr, Error::Kind::Incompatible,
            "checkpoint missing tensor " + p.name);
    require(t->rows == p.rows && t->cols == p.cols, Error::Kind::Incompatible,
            "checkpoint tensor " + p.name + " has shape " + std::to_string(t->rows) +
                "x" + std::to_string(t->cols) + ", expected " +
                std::to_string(p.rows) + "x" + std::to_string(p.cols));
    for (size_t i = 0; i < p.w.size(); ++i) p.w[i] = static_cast<double>(t->values[i]);
  }
}

uint64_t file_fingerprint(const std::string& path) { return fnv1a(read_file(path)); }

}  // namespace seqctl
