#pragma once

#include "voxfuse/adam.hpp"
#include "voxfuse/networks.hpp"
#include "voxfuse/render.hpp"
#include "voxfuse/schedule.hpp"
#include "voxfuse/unprojection.hpp"

#include <deque>
#include <memory>

namespace vf {

/// Posed views of one scene at two resolutions. low_res[i] views the same camera as frames[i].
struct MultiViewScene {
  std::string id;
  std::vector<PosedImage> frames;   // high resolution
  std::vector<PosedImage> low_res;  // downsampled targets

  void validate() const;
};

/// Every learnable component of the generator.
struct GeneratorModels {
  GridSpec grid;
  std::unique_ptr<VolumeDenoiser> volume;
  std::unique_ptr<SuperResDenoiser> superres;
  FieldDecoder decoder;
  Encoder2D encoder;
  Accumulator accumulator;

  std::vector<ParameterSet*> parameter_sets();
  /// All parameters merged under their prefixed names.
  NamedTensors all_parameters() const;
  /// Copies tensors from `values` into matching parameters; throws on missing or misshaped ones.
  void load_parameters(const NamedTensors& values);
};

struct ModelConfig {
  Index grid_resolution = 16;
  Index channels = 16;
  Index volume_width = 16;
  Index superres_width = 16;
  Index encoder_width = 16;
  Index accumulator_hidden = 32;
  Index decoder_hidden = 32;
  Index embedding = 16;
  bool zero_init_heads = false;
};

GeneratorModels make_models(const ModelConfig& cfg, Rng& rng);

/// Bilinear upsampling of a [C, h, w] image by an integer factor with edge clamping.
Var upsample_bilinear(Var image, Index factor);
Tensor upsample_bilinear(const Tensor& image, Index factor);

/// One-shot clean estimate D(V_T, V_bar, T) from pure noise.
Tensor bootstrap_clean_volume(const VolumeDenoiser& denoiser, const Tensor& cond, const NoiseSchedule& sched, Rng& rng);

struct TrainingConfig {
  Index source_frames = 15;
  Index target_frames = 4;
  double empty_condition_probability = 0.2;
  bool eq_weighting = false;
  /// Let the super-resolution loss backpropagate into the 3D pipeline through the conditioning render.
  bool couple_superres = false;
  RenderConfig render;
  AdamConfig adam{5e-5};
  int plateau_window = 200;
  double plateau_tolerance = 0.01;
  double lr_decay = 10.0;

  void validate() const;
};

struct StepResult {
  double loss_3d = 0.0;
  double loss_2d = 0.0;
  int t_volume = 0;
  int t_image = 0;
  Index source_count = 0;
  NamedTensors grads;

  double joint() const { return loss_3d + loss_2d; }
};

/// The joint objective of one training sample, built but not evaluated.
struct TrainingGraph {
  std::unique_ptr<Graph> graph;
  Var loss_3d;
  Var loss_2d;
  Var total;  // weighted sum used for gradients
  int t_volume = 0;
  int t_image = 0;
  Index source_count = 0;
};

TrainingGraph build_training_graph(const MultiViewScene& scene, const GeneratorModels& models, const NoiseSchedule& sched,
                                   const TrainingConfig& cfg, Rng& rng);

/// One sample of the joint volume and super-resolution objectives with gradients for every model.
StepResult holo_training_step(const MultiViewScene& scene, GeneratorModels& models, const NoiseSchedule& sched,
                              const TrainingConfig& cfg, Rng& rng);

/// Serial Adam training with tenfold learning-rate decay on plateaus.
class Trainer {
 public:
  Trainer(GeneratorModels& models, NoiseSchedule sched, TrainingConfig cfg);

  StepResult step(const MultiViewScene& scene, Rng& rng);
  double learning_rate() const { return adam_.config.learning_rate; }
  int steps() const { return adam_.step; }

 private:
  GeneratorModels& models_;
  NoiseSchedule sched_;
  TrainingConfig cfg_;
  AdamState adam_;
  double window_sum_ = 0.0;
  int window_count_ = 0;
  double previous_window_ = -1.0;
};

/// Ancestral super-resolution of a [h, w, 3] render to [factor h, factor w, 3], clamped to [0, 1].
Tensor super_resolve(const SuperResDenoiser& denoiser, const Tensor& low_res, Index factor, const NoiseSchedule& sched,
                     Rng& rng);

struct SampledScene {
  VoxelGrid volume;
  std::vector<Tensor> renders;
};

/// Runs the volume reverse chain conditioned on `cond_frames` (none means unconditional) and
/// renders the result at each camera.
SampledScene sample_scene(GeneratorModels& models, const NoiseSchedule& sched, std::span<const PosedImage> cond_frames,
                          std::span<const Camera> cameras, const RenderConfig& render_cfg, Rng& rng);

}  // namespace vf
