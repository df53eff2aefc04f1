#pragma once

#include "voxfuse/distill.hpp"
#include "voxfuse/gradcheck.hpp"
#include "voxfuse/scene.hpp"

#include <json.hpp>

#include <filesystem>

namespace vf {

struct ScheduleSettings {
  int steps = 100;
  // The usual 1000-step range [1e-4, 0.02] scaled by 1000 / steps, so alpha_bar(T) ends near zero.
  double beta_min = 1e-3;
  double beta_max = 0.2;
  bool eq_weighting = false;
};

struct SceneSettings {
  Index count = 5;
  Index blobs = 3;
  Index grid_resolution = 32;
  Index channels = 16;
  Index image_size = 64;
  Index low_res_factor = 2;
  Index cameras = 40;
  double radius = 4.0;
  double elevation = 0.0;
  double fov = 0.6;
  Index samples = 64;
};

struct TrainSettings {
  int steps = 2000;
  double learning_rate = 5e-5;
  Index source_frames = 15;
  Index target_frames = 4;
  double empty_probability = 0.2;
  bool couple_superres = false;
  int plateau_window = 200;
  int log_every = 50;
};

struct DistillSettings {
  Index resolution = 32;
  /// Resolution of the ground-truth volume that seeds synthetic banks.
  Index initial_resolution = 4;
  int steps = 2000;
  double learning_rate = 2e-4;
  Index patch = 16;
  Index batch_cameras = 4;
  Index tiles_per_camera = 4;
  Index k = 5;
  std::string loss = "patch-remix";
  /// oracle: K exact renders; corrupted: localized per-tile corruptions; sampled: super-resolved
  /// renders of a generated volume (needs a checkpoint).
  std::string bank = "oracle";
  double corrupt_probability = 0.6;
  Index corrupt_size = 10;
  Index heldout = 8;
  double heldout_elevation = 0.25;
};

struct HeatmapSettings {
  Index k = 10;
  Index camera = 0;
  Index mask_size = 24;
  double noise = 0.02;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::string checkpoint;  // empty: freshly initialised models
  ScheduleSettings schedule;
  SceneSettings scene;
  ModelConfig model;
  TrainSettings train;
  DistillSettings distill;
  HeatmapSettings heatmap;
  double gradcheck_step = 1e-5;
};

using Json = nlohmann::json;

/// Strict conversion: unknown keys and mistyped values raise ValidationError.
ExperimentConfig config_from_json(const Json& j);
Json to_json(const ExperimentConfig& cfg);
/// Reads a JSON config; missing keys keep their defaults.
ExperimentConfig load_config(const std::filesystem::path& path);
/// Applies "a.b=value" overrides. Values parse as JSON when possible, otherwise as strings.
void apply_override(Json& j, const std::string& assignment);
/// Checks ranges and that referenced input files exist.
void validate_config(const ExperimentConfig& cfg);

/// FNV-1a over the canonical JSON of every setting except the output directory.
std::string config_hash(const ExperimentConfig& cfg);

inline const std::vector<std::string>& experiment_stages() {
  static const std::vector<std::string> stages{"make-scene", "gradcheck", "train",   "sample",
                                               "distill",    "ablate",    "heatmap", "report"};
  return stages;
}

/// Runs one stage, writing artifacts, report.json and timings.json into the output directory.
/// A failing stage still leaves a report marked "failed" before the error propagates.
Json run_experiment(const ExperimentConfig& cfg, const std::string& stage);

/// Keeps freed heap memory mapped. The optimisation loops allocate and free the same large
/// buffers every step, and returning them to the kernel each time costs a third of the runtime.
void configure_allocator();

/// Throws ValidationError unless the report carries version, stage, seed and config hash.
void validate_report(const Json& report);

// Building blocks shared by the stages and the acceptance checks.

NoiseSchedule make_schedule(const ScheduleSettings& s);
SceneSpec scene_spec(const ExperimentConfig& cfg, std::uint64_t scene_seed);
std::vector<SyntheticScene> make_training_scenes(const ExperimentConfig& cfg);
std::vector<Camera> heldout_cameras(const ExperimentConfig& cfg);

/// K identical ground-truth renders per camera.
HypothesisBank oracle_bank(const SyntheticScene& scene, Index k);
/// Ground-truth renders with random colored squares inside tiles. In every tile one randomly
/// chosen hypothesis stays clean; the others are corrupted with the given probability.
HypothesisBank corrupted_bank(const SyntheticScene& scene, Index k, Index patch, double probability, Index size,
                              Rng& rng);
/// Ground truth plus small noise everywhere and strong noise inside a centred square mask.
HypothesisBank masked_bank(const SyntheticScene& scene, Index k, Index mask_size, double noise, Rng& rng);
/// [H, W] indicator of the centred square used by masked_bank.
Tensor center_mask(Index height, Index width, Index size);

struct DistillEvaluation {
  DistillResult result;
  double initial_psnr = 0.0;
  double mean_psnr = 0.0;
  std::vector<double> heldout_psnr;
};

/// Distills a bank starting from the scene's blobs voxelised at the initial resolution, then
/// scores held-out views against ground truth.
DistillEvaluation distill_and_evaluate(const ExperimentConfig& cfg, const SceneSpec& spec, const SyntheticScene& scene,
                                       const HypothesisBank& bank, DistillLoss loss, const SdsPrior& prior = {});

}  // namespace vf
