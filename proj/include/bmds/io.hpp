#pragma once

#include "bmds/backbone.hpp"
#include "bmds/datagen.hpp"
#include "bmds/tensor.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmds {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Volume file: "BMDSVOL1", u32 version = 1, u32 dtype = 0 (f64), u32 ndim,
// u64 dims[ndim], then the row-major raster. All fields little-endian.
inline constexpr std::uint32_t kVolumeVersion = 1;

std::string encode_volume(const Tensor& t);
Tensor decode_volume(const std::string& bytes, const std::string& source = "<memory>");
void write_volume(const std::string& path, const Tensor& t);
Tensor read_volume(const std::string& path);

// Checkpoint: "BMDSCKP1", u32 version, u64 config hash, i64 epoch,
// f64 best metric, u64 seed, u32 flags (bit0 mmcf, bit1 dds), u32 stage,
// u32 count, then per entry u32 name length, name, u32 ndim, u64 dims, raster.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::int64_t epoch = 0;
  double best_metric = 0.0;
  std::uint64_t seed = 0;
  WiringFlags flags;
  std::uint32_t stage = 1;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  CheckpointMeta meta;
  NamedParams params;

  bool has_bayes_head() const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "<memory>");
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Snapshot of the model's tensors (values copied).
Checkpoint make_checkpoint(const Model& model, const CheckpointMeta& meta);

/// Builds the model described by `config` (wiring taken from the checkpoint)
/// and loads every tensor. A Bayesian head in the checkpoint is attached.
/// Throws IoError on a missing, extra, or mis-shaped tensor, and on a
/// config-hash mismatch unless `allow_config_mismatch`.
Model load_model(const Checkpoint& ckpt, ModelConfig config,
                 std::optional<std::uint64_t> expected_hash = std::nullopt,
                 bool allow_config_mismatch = false);

/// Loads a stage-1 checkpoint and swaps in a fresh Bayesian head.
Model load_bayes_model(const Checkpoint& ckpt, ModelConfig config, double rho_init, double kl_beta,
                       std::optional<std::uint64_t> expected_hash = std::nullopt,
                       bool allow_config_mismatch = false);

// Dataset directory: manifest.csv plus one volume file per case holding the
// image channels followed by the label channels.
struct DatasetFiles {
  std::vector<Sample> samples;  // raw intensities
  std::vector<Split> splits;
};

void write_dataset(const std::string& dir, const DatasetFiles& data, const PhantomSpec& spec);
DatasetFiles read_dataset(const std::string& dir, std::int64_t regions = 3);

/// Whole-file helpers. Writes go through a temporary file and a rename.
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

/// Minimal CSV writer. Cells must not contain commas or newlines.
std::string csv_text(const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

/// Six significant digits, "%.6g" style.
std::string fmt6(double v);
std::string fmt6(const std::optional<double>& v);  // empty when absent

}  // namespace bmds
