#pragma once

#include <string>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/model.hpp"

// Bit-exact binary containers and the synthetic dataset generator.
//
// Grid file (.ssgr):  "SSGR" | u32 version=1 | u32 rank | rank*u32 extents |
//                     f32 payload, row-major. All integers and floats are
//                     little-endian.
// Mask file (.ssmk):  "SSMK" | u32 version=1 | u32 H | u32 W | H*W u8 class
//                     ids, row-major; 0 is background.
// Manifest:           UTF-8 text, one record per line:
//                     sample_id TAB embedding_path TAB mask_path
//                     '#' starts a comment line. Paths are resolved relative
//                     to the manifest's directory.
// Checkpoint (.sscp): "SSCP" | u32 version=1 | model dims | u64 step |
//                     u32 count | count x (name, group, embedded grid file).
namespace pseg {

struct IdMask {
  int64_t height = 0, width = 0;
  std::vector<uint8_t> ids;
};

void write_grid(const std::string& path, const NdArray& grid);
NdArray read_grid(const std::string& path);

void write_mask(const std::string& path, const IdMask& mask);
IdMask read_mask(const std::string& path);

// 8-bit binary portable graymap of a [0,1] grid (values scaled to 0..255).
void write_pgm(const std::string& path, const NdArray& normalized);

struct ManifestEntry {
  std::string id;
  std::string embedding_path;
  std::string mask_path;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);

struct DataSample {
  std::string id;
  NdArray embedding;                     // (h,w,d)
  IdMask mask;                           // native resolution
  std::vector<int64_t> present_classes;  // ids with at least one pixel, ascending
};

struct Dataset {
  std::vector<DataSample> samples;
  int64_t max_class() const;
  int64_t pair_count() const;  // total (image, present class) prompts
};

Dataset load_dataset(const std::string& manifest_path);

// (H,W) float 0/1 grid for one class id.
NdArray binary_mask(const IdMask& mask, int64_t cls);

// Nearest-neighbour resample of a binary grid (floor index mapping), label
// preserving in both directions.
NdArray nn_resample(const NdArray& grid, int64_t out_h, int64_t out_w);

struct SynthConfig {
  int64_t classes = 3;
  int64_t height = 8, width = 8;
  int64_t channels = 16;
  int64_t samples = 64;
  int64_t sample_offset = 0;  // first sample index; lets a held-out split share the seed's class signatures
  int64_t shapes_min = 1, shapes_max = 3;
  float snr = 4.0f;
  uint64_t seed = 0;

  void validate() const {
    if (classes < 2) fail(ErrCode::Config, "synthetic classes must be >= 2");
    if (height < 4 || width < 4) fail(ErrCode::Config, "synthetic grid must be at least 4x4");
    if (channels < 1) fail(ErrCode::Config, "channels must be >= 1");
    if (samples < 1) fail(ErrCode::Config, "samples must be >= 1");
    if (sample_offset < 0) fail(ErrCode::Config, "sample_offset must be >= 0");
    if (shapes_min < 1 || shapes_max < shapes_min) fail(ErrCode::Config, "bad shapes-per-image range");
    if (!(snr > 0)) fail(ErrCode::Config, "snr must be positive");
  }
};

// Per-class channel signatures mu_0..mu_C (background first), orthonormalised
// where the channel count allows.
std::vector<NdArray> class_signatures(int64_t classes, int64_t channels, uint64_t seed);

// Writes embeddings, masks and a manifest under out_dir; returns the manifest
// path. Deterministic for a given config.
std::string gen_synthetic(const SynthConfig& cfg, const std::string& out_dir);

void save_checkpoint(const std::string& path, const ModelState& state, const std::string& config_echo);
ModelState load_checkpoint(const std::string& path);

}  // namespace pseg
