#include "ltx/error.hpp"
#include "ltx/nnet.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

// Layout (all integers little-endian):
//   char[8]  "LTXCKPT\0"
//   u32      format version
//   u64      FNV-1a digest of the config text
//   u32 len, config text (canonical "key = value" lines)
//   u32      parameter count
//   per parameter: u32 len, name, u32 rows, u32 cols, rows*cols f64 (column-major)

namespace ltx {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) throw CorruptFileError("checkpoint is truncated");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > data_.size() - pos_) throw CorruptFileError("checkpoint is truncated");
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const TransducerModel& model, const std::filesystem::path& path) {
  std::ostringstream buf(std::ios::binary);
  Writer w(buf);
  const std::string config_text = model.config().to_config().serialize();
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(fnv1a64(config_text));
  w.str(config_text);
  const auto params = model.params();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const Param* p : params) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rows()));
    w.u32(static_cast<std::uint32_t>(p->value.cols()));
    w.bytes(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::string bytes = buf.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

TransducerModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());

  char magic[sizeof kCheckpointMagic];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CorruptFileError("not a checkpoint file: " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint format version " + std::to_string(version) +
                               ", expected " + std::to_string(kCheckpointVersion));
  const std::uint64_t digest = r.u64();
  const std::string config_text = r.str();
  if (fnv1a64(config_text) != digest) throw CorruptFileError("checkpoint config digest mismatch");

  TransducerModel model(ModelConfig::from_config(ConfigMap::parse(config_text)));
  const std::uint32_t count = r.u32();
  const auto params = model.params();
  if (count != params.size())
    throw CorruptFileError("checkpoint has " + std::to_string(count) + " parameters, config implies " +
                           std::to_string(params.size()));
  for (Param* p : params) {
    const std::string name = r.str();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (name != p->name || rows != p->value.rows() || cols != p->value.cols())
      throw CorruptFileError("unexpected parameter record '" + name + "'");
    r.bytes(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  if (!r.at_end()) throw CorruptFileError("trailing bytes in checkpoint");
  return model;
}

ImportReport import_params(TransducerModel& model, const TransducerModel& source,
                           const std::vector<std::string>& prefixes) {
  auto selected = [&](const std::string& name) {
    for (const auto& prefix : prefixes)
      if (prefix == "." || name.compare(0, prefix.size(), prefix) == 0) return true;
    return false;
  };
  // Check every shape before touching the model.
  std::vector<std::pair<Param*, const Param*>> plan;
  ImportReport report;
  for (Param* p : model.params()) {
    const Param* src = selected(p->name) ? source.find(p->name) : nullptr;
    if (!src) {
      report.skipped.push_back(p->name);
      continue;
    }
    if (src->value.rows() != p->value.rows() || src->value.cols() != p->value.cols())
      throw ValidationError("shape mismatch importing parameter '" + p->name + "'");
    plan.emplace_back(p, src);
  }
  for (auto [dst, src] : plan) {
    dst->value = src->value;
    report.imported.push_back(dst->name);
  }
  return report;
}

}  // namespace ltx
