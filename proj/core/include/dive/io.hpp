#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dive/backbone.hpp"
#include "dive/conditions.hpp"
#include "dive/latent.hpp"
#include "dive/mad.hpp"

namespace dive {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct DatasetRecord {
  SceneSpec scene;
  LatentGrid video;  // values representable in f32

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

/// Rounds every value to the nearest f32 so a stored record reads back equal.
void round_to_f32(LatentGrid& x);

/// "DIVK" file: version, record count, video dims, then (SceneSpec, f32 video)
/// per record. All records share one shape.
void dataset_write(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> dataset_read(const std::filesystem::path& path);

struct Checkpoint {
  ModelParams model;
  std::optional<BranchParams> branches;
};

/// "DIVM" file with the config block and named parameter table, followed by an
/// optional "MADB" section holding the distillation branches.
void checkpoint_write(const std::filesystem::path& path, ModelParams& model, BranchParams* branches = nullptr);
Checkpoint checkpoint_read(const std::filesystem::path& path);

/// One binary PPM (P6) per (view, frame) named view{v}_frame{t}.ppm, from
/// channels 0..2 mapped affinely from [lo, hi] to [0, 255] and clamped.
std::vector<std::filesystem::path> export_frames(const LatentGrid& x, const std::filesystem::path& dir, double lo = 0.0,
                                                 double hi = 1.0);

struct PpmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int max_value = 0;
  std::vector<std::uint8_t> pixels;  // RGB
};
PpmImage read_ppm(const std::filesystem::path& path);

inline constexpr int kMetricsSchemaVersion = 1;

struct MetricsRow {
  std::string config_hash;
  std::string run;
  std::string guidance;
  std::string schedule;
  std::size_t steps = 0;
  std::size_t nfe = 0;
  std::size_t token_steps = 0;
  double wall_ms = 0.0;
  double speedup = 0.0;
  double sample_mse = -1.0;     // -1 when not measured
  double distill_error = -1.0;  // -1 when not measured
};

/// Column order of metrics.csv; the first column is the schema version.
const std::vector<std::string>& metrics_columns();
/// Writes the header when the file is new or `append` is false.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows, bool append = false);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace dive
