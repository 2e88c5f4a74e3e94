#include "bmds/io.hpp"

#include "bmds/bayes.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace bmds {

namespace {

constexpr char kVolumeMagic[8] = {'B', 'M', 'D', 'S', 'V', 'O', 'L', '1'};
constexpr char kCheckpointMagic[8] = {'B', 'M', 'D', 'S', 'C', 'K', 'P', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError(source_ + ": truncated file");
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  bool at_end() const { return pos_ == data_.size(); }
  const std::string& source() const { return source_; }

 private:
  const std::string& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

void put_tensor_body(Writer& w, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.ndim()));
  for (auto d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
  for (double v : t.data()) w.f64(v);
}

Tensor get_tensor_body(Reader& r) {
  const std::uint32_t ndim = r.u32();
  if (ndim > 16) throw IoError(r.source() + ": implausible rank " + std::to_string(ndim));
  Shape shape(ndim);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    const std::uint64_t v = r.u64();
    if (v > (1ULL << 40)) throw IoError(r.source() + ": implausible dimension");
    d = static_cast<std::int64_t>(v);
    n *= v;
  }
  r.need(static_cast<std::size_t>(n * 8));
  std::vector<double> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = r.f64();
  return Tensor(std::move(shape), std::move(data));
}

void check_magic(Reader& r, const char (&magic)[8], const char* what) {
  if (r.bytes(8) != std::string(magic, 8)) throw IoError(r.source() + ": not a " + what + " file");
}

}  // namespace

std::string encode_volume(const Tensor& t) {
  Writer w;
  w.bytes(kVolumeMagic, 8);
  w.u32(kVolumeVersion);
  w.u32(0);
  put_tensor_body(w, t);
  return w.take();
}

Tensor decode_volume(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  check_magic(r, kVolumeMagic, "volume");
  const auto version = r.u32();
  if (version != kVolumeVersion) throw IoError(source + ": unsupported volume version " + std::to_string(version));
  const auto dtype = r.u32();
  if (dtype != 0) throw IoError(source + ": unsupported dtype tag " + std::to_string(dtype));
  Tensor t = get_tensor_body(r);
  if (!r.at_end()) throw IoError(source + ": trailing bytes after payload");
  return t;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp + "' into place: " + ec.message());
}

void write_volume(const std::string& path, const Tensor& t) { write_file(path, encode_volume(t)); }
Tensor read_volume(const std::string& path) { return decode_volume(read_file(path), path); }

bool Checkpoint::has_bayes_head() const {
  for (const auto& [name, t] : params) {
    if (name.rfind("bayes_head.", 0) == 0) return true;
  }
  return false;
}

std::string encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(kCheckpointMagic, 8);
  w.u32(c.version);
  w.u64(c.meta.config_hash);
  w.i64(c.meta.epoch);
  w.f64(c.meta.best_metric);
  w.u64(c.meta.seed);
  w.u32((c.meta.flags.use_mmcf ? 1u : 0u) | (c.meta.flags.use_dds ? 2u : 0u));
  w.u32(c.meta.stage);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& [name, t] : c.params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    put_tensor_body(w, t);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  check_magic(r, kCheckpointMagic, "checkpoint");
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion) {
    throw IoError(source + ": unsupported checkpoint version " + std::to_string(c.version));
  }
  c.meta.config_hash = r.u64();
  c.meta.epoch = r.i64();
  c.meta.best_metric = r.f64();
  c.meta.seed = r.u64();
  const auto flags = r.u32();
  if (flags > 3) throw IoError(source + ": bad wiring flags");
  c.meta.flags = {(flags & 1u) != 0, (flags & 2u) != 0};
  c.meta.stage = r.u32();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u32();
    if (len > 4096) throw IoError(source + ": implausible tensor name length");
    std::string name = r.bytes(len);
    c.params.emplace_back(std::move(name), get_tensor_body(r));
  }
  if (!r.at_end()) throw IoError(source + ": trailing bytes after parameter table");
  return c;
}

void write_checkpoint(const std::string& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }
Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

Checkpoint make_checkpoint(const Model& model, const CheckpointMeta& meta) {
  Checkpoint c;
  c.meta = meta;
  c.meta.flags = model.config.flags;
  c.meta.stage = model.bayes_head ? 2u : 1u;
  for (const auto& [name, t] : model.named_parameters()) c.params.emplace_back(name, t.detach());
  return c;
}

namespace {

void check_hash(const Checkpoint& ckpt, std::optional<std::uint64_t> expected, bool allow) {
  if (!expected || *expected == ckpt.meta.config_hash || allow) return;
  char buf[128];
  std::snprintf(buf, sizeof buf, "checkpoint config hash %016llx does not match config %016llx",
                static_cast<unsigned long long>(ckpt.meta.config_hash),
                static_cast<unsigned long long>(*expected));
  throw IoError(std::string(buf) + " (pass --allow-config-mismatch to override)");
}

void copy_into(const Checkpoint& ckpt, const Model& model) {
  std::map<std::string, const Tensor*> table;
  for (const auto& [name, t] : ckpt.params) {
    if (!table.emplace(name, &t).second) throw IoError("checkpoint: duplicate tensor '" + name + "'");
  }
  const auto named = model.named_parameters();
  for (const auto& [name, dst] : named) {
    const auto it = table.find(name);
    if (it == table.end()) throw IoError("checkpoint: missing tensor '" + name + "'");
    const Tensor& src = *it->second;
    if (src.shape() != dst.shape()) {
      throw IoError("checkpoint: shape mismatch for '" + name + "': file " + shape_str(src.shape()) +
                    ", model " + shape_str(dst.shape()));
    }
    Tensor target = dst;
    std::copy(src.data().begin(), src.data().end(), target.data().begin());
  }
  if (table.size() != named.size()) {
    for (const auto& [name, t] : ckpt.params) {
      bool known = false;
      for (const auto& [n2, t2] : named) known = known || n2 == name;
      if (!known) throw IoError("checkpoint: unexpected tensor '" + name + "'");
    }
  }
}

}  // namespace

Model load_model(const Checkpoint& ckpt, ModelConfig config, std::optional<std::uint64_t> expected_hash,
                 bool allow_config_mismatch) {
  check_hash(ckpt, expected_hash, allow_config_mismatch);
  config.flags = ckpt.meta.flags;
  Model model = build_model(config);
  // kl_beta is not stored; callers that keep training set it.
  if (ckpt.has_bayes_head()) attach_bayes_head(model, kDefaultRhoInit, 0.0);
  copy_into(ckpt, model);
  return model;
}

Model load_bayes_model(const Checkpoint& ckpt, ModelConfig config, double rho_init, double kl_beta,
                       std::optional<std::uint64_t> expected_hash, bool allow_config_mismatch) {
  if (ckpt.has_bayes_head()) throw IoError("load_bayes_model: checkpoint already has a Bayesian head");
  Model model = load_model(ckpt, std::move(config), expected_hash, allow_config_mismatch);
  attach_bayes_head(model, rho_init, kl_beta);
  return model;
}

void write_dataset(const std::string& dir, const DatasetFiles& data, const PhantomSpec& spec) {
  if (data.samples.size() != data.splits.size()) throw IoError("write_dataset: samples and splits differ in length");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  std::string manifest = "# bmds phantom dataset\n";
  manifest += "# size=" + std::to_string(spec.size) + " modalities=" + std::to_string(spec.num_modalities) +
              " regions=" + std::to_string(spec.num_regions) + " informative_channel=" +
              std::to_string(spec.informative_channel) + " noise_std=" + fmt6(spec.noise_std) +
              " seed=" + std::to_string(spec.seed) + "\n";
  manifest += "id,split,file\n";
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    const std::string file = s.id + ".vol";
    write_volume((std::filesystem::path(dir) / file).string(), cat({s.volume, s.label}, 0));
    manifest += s.id + "," + split_name(data.splits[i]) + "," + file + "\n";
  }
  write_file((std::filesystem::path(dir) / "manifest.csv").string(), manifest);
}

DatasetFiles read_dataset(const std::string& dir, std::int64_t regions) {
  const std::string manifest_path = (std::filesystem::path(dir) / "manifest.csv").string();
  std::istringstream in(read_file(manifest_path));
  DatasetFiles out;
  std::string line;
  bool header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "id,split,file") throw IoError(manifest_path + ": unexpected header '" + line + "'");
      header = true;
      continue;
    }
    const auto a = line.find(','), b = line.find(',', a == std::string::npos ? a : a + 1);
    if (a == std::string::npos || b == std::string::npos) {
      throw IoError(manifest_path + ":" + std::to_string(lineno) + ": expected id,split,file");
    }
    const std::string id = line.substr(0, a), split = line.substr(a + 1, b - a - 1), file = line.substr(b + 1);
    Split sp;
    if (split == "train") sp = Split::train;
    else if (split == "val") sp = Split::val;
    else if (split == "test") sp = Split::test;
    else throw IoError(manifest_path + ":" + std::to_string(lineno) + ": unknown split '" + split + "'");
    const Tensor t = read_volume((std::filesystem::path(dir) / file).string());
    if (t.ndim() != 4 || t.dim(0) <= regions) throw IoError(file + ": expected [M + R, S, S, S] volume");
    const std::int64_t M = t.dim(0) - regions, V = t.numel() / t.dim(0);
    const auto d = t.data();
    Shape vs{M, t.dim(1), t.dim(2), t.dim(3)}, ls{regions, t.dim(1), t.dim(2), t.dim(3)};
    out.samples.push_back({Tensor(vs, std::vector<double>(d.begin(), d.begin() + M * V)),
                           Tensor(ls, std::vector<double>(d.begin() + M * V, d.end())), id});
    out.splits.push_back(sp);
  }
  if (!header) throw IoError(manifest_path + ": missing header");
  return out;
}

std::string csv_text(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].find_first_of(",\n") != std::string::npos) throw IoError("csv: cell contains a separator");
      out += (i ? "," : "") + cells[i];
    }
    out += "\n";
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw IoError("csv: row width does not match header");
    line(r);
  }
  return out;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  write_file(path, csv_text(header, rows));
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string fmt6(const std::optional<double>& v) { return v ? fmt6(*v) : std::string(); }

}  // namespace bmds
