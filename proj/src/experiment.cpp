#include "voxfuse/experiment.hpp"

#include "voxfuse/error.hpp"
#include "voxfuse/io.hpp"

#include <fcntl.h>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <sstream>

namespace vf {

namespace {

// --- strict config reading -------------------------------------------------------------------------

void assign(const Json& v, const std::string& key, int& out) {
  if (!v.is_number_integer()) throw ValidationError("config key '" + key + "' must be an integer");
  out = v.get<int>();
}
void assign(const Json& v, const std::string& key, Index& out) {
  if (!v.is_number_integer()) throw ValidationError("config key '" + key + "' must be an integer");
  out = v.get<Index>();
}
void assign(const Json& v, const std::string& key, std::uint64_t& out) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    throw ValidationError("config key '" + key + "' must be a non-negative integer");
  }
  out = v.get<std::uint64_t>();
}
void assign(const Json& v, const std::string& key, double& out) {
  if (!v.is_number()) throw ValidationError("config key '" + key + "' must be a number");
  out = v.get<double>();
}
void assign(const Json& v, const std::string& key, bool& out) {
  if (!v.is_boolean()) throw ValidationError("config key '" + key + "' must be true or false");
  out = v.get<bool>();
}
void assign(const Json& v, const std::string& key, std::string& out) {
  if (!v.is_string()) throw ValidationError("config key '" + key + "' must be a string");
  out = v.get<std::string>();
}

class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config section '" + (path_.empty() ? "<root>" : path_) + "' must be an object");
  }

  template <class T>
  void read(const std::string& key, T& out) {
    used_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) assign(*it, path_ + key, out);
  }

  Section sub(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? Section(empty(), path_ + key + ".") : Section(*it, path_ + key + ".");
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ValidationError("unknown config key '" + path_ + it.key() + "'");
    }
  }

 private:
  static const Json& empty() {
    static const Json e = Json::object();
    return e;
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

std::string iso_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Exclusive per-directory lock; released on destruction.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw IoError("output directory " + dir.string() + " is locked by another run (remove " + path_.string() + " if stale)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd_, pid.data(), pid.size());
  }
  ~DirectoryLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

RenderConfig scene_render(const ExperimentConfig& cfg) {
  RenderConfig rc;
  rc.samples_per_ray = static_cast<int>(cfg.scene.samples);
  return rc;
}

TrainingConfig training_config(const ExperimentConfig& cfg) {
  TrainingConfig tc;
  tc.source_frames = cfg.train.source_frames;
  tc.target_frames = cfg.train.target_frames;
  tc.empty_condition_probability = cfg.train.empty_probability;
  tc.eq_weighting = cfg.schedule.eq_weighting;
  tc.couple_superres = cfg.train.couple_superres;
  tc.render = scene_render(cfg);
  tc.adam.learning_rate = cfg.train.learning_rate;
  tc.plateau_window = cfg.train.plateau_window;
  return tc;
}

GeneratorModels load_or_make_models(const ExperimentConfig& cfg, bool zero_heads_when_fresh) {
  Rng rng(cfg.seed ^ 0x5eedf00dULL);
  ModelConfig mc = cfg.model;
  if (cfg.checkpoint.empty()) mc.zero_init_heads = mc.zero_init_heads || zero_heads_when_fresh;
  GeneratorModels models = make_models(mc, rng);
  if (!cfg.checkpoint.empty()) models.load_parameters(load_checkpoint(cfg.checkpoint));
  return models;
}

std::vector<Camera> ring_cameras(const ExperimentConfig& cfg, Index count, Index size) {
  RingSpec ring{static_cast<int>(count), cfg.scene.radius, cfg.scene.elevation, 0.0, cfg.scene.fov};
  return camera_ring(ring, size, size);
}

Json rows_json(std::span<const double> v) { return Json(std::vector<double>(v.begin(), v.end())); }

// --- stages ------------------------------------------------------------------------------------------

void stage_make_scene(const ExperimentConfig& cfg, const fs::path& out, Json& m) {
  const SceneSpec spec = scene_spec(cfg, cfg.seed);
  const SyntheticScene scene = gen_synthetic_scene(spec);
  save_grid(out / "scene.hfvg", scene.grid);
  save_checkpoint(out / "decoder.hfck", scene.decoder.params);
  save_posed_dataset(out / "views", scene.views.frames);
  save_posed_dataset(out / "views_low", scene.views.low_res);
  std::vector<double> intensity;
  for (const PosedImage& f : scene.views.frames) intensity.push_back(f.image.array().mean());
  m["blobs"] = spec.blobs.size();
  m["frames"] = scene.views.frames.size();
  m["grid_resolution"] = spec.grid_resolution;
  m["mean_intensity"] = rows_json(intensity);
}

void stage_gradcheck(const ExperimentConfig& cfg, const fs::path&, Json& m) {
  const std::vector<GradcheckRow> rows = run_gradchecks(cfg.seed, cfg.gradcheck_step);
  Json checks = Json::array();
  bool ok = true;
  double worst = 0.0;
  for (const GradcheckRow& r : rows) {
    checks.push_back({{"name", r.name},
                      {"max_relative_error", r.max_relative_error},
                      {"tolerance", r.tolerance},
                      {"entries", r.entries},
                      {"passed", r.passed()}});
    ok = ok && r.passed();
    worst = std::max(worst, r.max_relative_error);
  }
  m["checks"] = checks;
  m["max_relative_error"] = worst;
  m["all_passed"] = ok;
  if (!ok) throw NumericalError("gradient check exceeded its tolerance");
}

void stage_train(const ExperimentConfig& cfg, const fs::path& out, Json& m) {
  const std::vector<SyntheticScene> scenes = make_training_scenes(cfg);
  GeneratorModels models = load_or_make_models(cfg, false);
  Trainer trainer(models, make_schedule(cfg.schedule), training_config(cfg));
  Rng rng(cfg.seed);
  std::ostringstream log;
  log << "step loss_3d loss_2d lr\n";
  std::vector<double> joint;
  Json curve = Json::array();
  double block = 0.0;
  for (int s = 0; s < cfg.train.steps; ++s) {
    const double lr = trainer.learning_rate();
    const StepResult r = trainer.step(scenes[static_cast<std::size_t>(s) % scenes.size()].views, rng);
    joint.push_back(r.joint());
    block += r.joint();
    char line[128];
    std::snprintf(line, sizeof line, "%d %.9g %.9g %.3g\n", s, r.loss_3d, r.loss_2d, lr);
    log << line;
    if ((s + 1) % cfg.train.log_every == 0) {
      curve.push_back(block / cfg.train.log_every);
      block = 0.0;
    }
  }
  write_text(out / "train_log.txt", log.str());
  save_checkpoint(out / "model.hfck", models.all_parameters());
  const std::size_t w = std::min<std::size_t>(50, joint.size());
  const double first = mean_of(std::span<const double>(joint).first(w));
  const double last = mean_of(std::span<const double>(joint).last(w));
  m["steps"] = cfg.train.steps;
  m["initial_joint_loss"] = first;
  m["final_joint_loss"] = last;
  m["reduction"] = first > 0.0 ? 1.0 - last / first : 0.0;
  m["final_learning_rate"] = trainer.learning_rate();
  m["curve"] = curve;
}

void stage_sample(const ExperimentConfig& cfg, const fs::path& out, Json& m) {
  GeneratorModels models = load_or_make_models(cfg, false);
  const NoiseSchedule sched = make_schedule(cfg.schedule);
  const Index low = cfg.scene.image_size / cfg.scene.low_res_factor;
  const std::vector<Camera> cams = ring_cameras(cfg, 4, low);
  Rng rng(cfg.seed);
  const SampledScene s = sample_scene(models, sched, {}, cams, scene_render(cfg), rng);
  save_grid(out / "sample.hfvg", s.volume);
  std::vector<double> means, sr_means;
  for (std::size_t i = 0; i < s.renders.size(); ++i) {
    write_png(out / ("sample_view" + std::to_string(i) + ".png"), s.renders[i]);
    const Tensor sr = super_resolve(*models.superres, s.renders[i], cfg.scene.low_res_factor, sched, rng);
    write_png(out / ("sample_view" + std::to_string(i) + "_super.png"), sr);
    means.push_back(s.renders[i].array().mean());
    sr_means.push_back(sr.array().mean());
  }
  const auto& f = s.volume.features.array();
  m["volume_mean"] = f.mean();
  m["volume_std"] = std::sqrt((f - f.mean()).square().mean());
  m["render_mean"] = rows_json(means);
  m["super_resolved_mean"] = rows_json(sr_means);
}

HypothesisBank first_hypothesis_only(const HypothesisBank& bank) {
  HypothesisBank one = bank;
  for (auto& stack : one.hypotheses) stack.resize(1);
  return one;
}

void write_heldout(const fs::path& out, const std::string& tag, const DistillEvaluation& e, const ExperimentConfig& cfg) {
  const std::vector<Camera> cams = heldout_cameras(cfg);
  if (cams.empty()) return;
  write_png(out / (tag + "_heldout0.png"), render(e.result.grid, e.result.decoder, cams.front(), scene_render(cfg)).image);
}

void stage_distill(const ExperimentConfig& cfg, const fs::path& out, Json& m) {
  const DistillLoss loss = parse_distill_loss(cfg.distill.loss);
  m["bank"] = cfg.distill.bank;
  m["loss"] = cfg.distill.loss;
  m["steps"] = cfg.distill.steps;
  if (cfg.distill.bank == "sampled") {
    GeneratorModels models = load_or_make_models(cfg, false);
    const NoiseSchedule sched = make_schedule(cfg.schedule);
    Rng rng(cfg.seed);
    const SampledScene s = sample_scene(models, sched, {}, {}, scene_render(cfg), rng);
    const std::vector<Camera> cams = ring_cameras(cfg, cfg.scene.cameras, cfg.scene.image_size);
    const HypothesisBank bank = build_hypothesis_bank(*models.superres, s.volume, models.decoder, cams, cfg.distill.k,
                                                      cfg.scene.low_res_factor, sched, scene_render(cfg), cfg.seed);
    save_bank(out / "bank", bank);
    DistillConfig dc;
    dc.resolution = cfg.distill.resolution;
    dc.patch = cfg.distill.patch;
    dc.steps = cfg.distill.steps;
    dc.learning_rate = cfg.distill.learning_rate;
    dc.batch_cameras = cfg.distill.batch_cameras;
    dc.tiles_per_camera = cfg.distill.tiles_per_camera;
    dc.loss = loss;
    dc.render = scene_render(cfg);
    dc.seed = cfg.seed;
    const DistillResult r = distill(s.volume, models.decoder, bank, dc, {models.superres.get(), &sched});
    std::vector<double> best;
    for (Index c = 0; c < bank.size(); ++c) {
      const Tensor img = render(r.grid, r.decoder, bank.cameras[static_cast<std::size_t>(c)], dc.render).image;
      double b = 0.0;
      for (const Tensor& h : bank.hypotheses[static_cast<std::size_t>(c)]) b = std::max(b, psnr(img, h));
      best.push_back(b);
    }
    save_grid(out / "distilled.hfvg", r.grid);
    save_checkpoint(out / "distilled_decoder.hfck", r.decoder.params);
    m["bank_psnr"] = mean_of(best);
    m["final_loss"] = r.losses.empty() ? 0.0 : r.losses.back();
    return;
  }
  const SceneSpec spec = scene_spec(cfg, cfg.seed);
  const SyntheticScene scene = gen_synthetic_scene(spec);
  Rng rng(cfg.seed ^ 0xb4c4ULL);
  HypothesisBank bank;
  if (cfg.distill.bank == "oracle") {
    bank = oracle_bank(scene, cfg.distill.k);
  } else if (cfg.distill.bank == "corrupted") {
    bank = corrupted_bank(scene, cfg.distill.k, cfg.distill.patch, cfg.distill.corrupt_probability,
                          cfg.distill.corrupt_size, rng);
  } else {
    throw ValidationError("unknown bank kind '" + cfg.distill.bank + "' (expected oracle, corrupted or sampled)");
  }
  GeneratorModels prior_models = load_or_make_models(cfg, true);
  const NoiseSchedule sched = make_schedule(cfg.schedule);
  const DistillEvaluation e =
      distill_and_evaluate(cfg, spec, scene, bank, loss, {prior_models.superres.get(), &sched});
  save_grid(out / "distilled.hfvg", e.result.grid);
  save_checkpoint(out / "distilled_decoder.hfck", e.result.decoder.params);
  write_heldout(out, "distilled", e, cfg);
  m["initial_psnr"] = e.initial_psnr;
  m["heldout_psnr"] = rows_json(e.heldout_psnr);
  m["mean_psnr"] = e.mean_psnr;
  m["final_loss"] = e.result.losses.empty() ? 0.0 : e.result.losses.back();
}

void stage_ablate(const ExperimentConfig& cfg, const fs::path& out, Json& m) {
  const SceneSpec spec = scene_spec(cfg, cfg.seed);
  const SyntheticScene scene = gen_synthetic_scene(spec);
  Rng rng(cfg.seed ^ 0xb4c4ULL);
  const HypothesisBank bank = corrupted_bank(scene, cfg.distill.k, cfg.distill.patch, cfg.distill.corrupt_probability,
                                             cfg.distill.corrupt_size, rng);
  GeneratorModels prior_models = load_or_make_models(cfg, true);
  const NoiseSchedule sched = make_schedule(cfg.schedule);
  const SdsPrior prior{prior_models.superres.get(), &sched};
  Json rows = Json::array();
  double remix = 0.0, plain = 0.0;
  for (DistillLoss loss : {DistillLoss::kPatchRemix, DistillLoss::kMse, DistillLoss::kSds}) {
    const HypothesisBank& used = loss == DistillLoss::kMse ? first_hypothesis_only(bank) : bank;
    const DistillEvaluation e = distill_and_evaluate(cfg, spec, scene, used, loss, prior);
    write_heldout(out, to_string(loss), e, cfg);
    rows.push_back({{"loss", to_string(loss)}, {"mean_psnr", e.mean_psnr}, {"heldout_psnr", rows_json(e.heldout_psnr)}});
    if (loss == DistillLoss::kPatchRemix) remix = e.mean_psnr;
    if (loss == DistillLoss::kMse) plain = e.mean_psnr;
  }
  m["rows"] = rows;
  m["patch_remix_gain_db"] = remix - plain;
}

void stage_heatmap(const ExperimentConfig& cfg, const fs::path& out, Json& m) {
  const SceneSpec spec = scene_spec(cfg, cfg.seed);
  const SyntheticScene scene = gen_synthetic_scene(spec);
  Rng rng(cfg.seed ^ 0x4ea7ULL);
  const HypothesisBank bank = masked_bank(scene, cfg.heatmap.k, cfg.heatmap.mask_size, cfg.heatmap.noise, rng);
  const Tensor heat = variance_heatmap(bank, cfg.heatmap.camera);
  write_png(out / "heatmap.png", heat, true);
  save_image(out / "heatmap.hfimg", heat.reshaped({heat.dim(0), heat.dim(1), 1}));
  const Tensor mask = center_mask(heat.dim(0), heat.dim(1), cfg.heatmap.mask_size);
  double in = 0.0, outside = 0.0, n_in = 0.0, n_out = 0.0;
  for (Index i = 0; i < heat.size(); ++i) {
    if (mask[i] > 0.5) {
      in += heat[i];
      n_in += 1.0;
    } else {
      outside += heat[i];
      n_out += 1.0;
    }
  }
  in /= std::max(1.0, n_in);
  outside /= std::max(1.0, n_out);
  m["k"] = cfg.heatmap.k;
  m["camera"] = cfg.heatmap.camera;
  m["mean_variance_inside"] = in;
  m["mean_variance_outside"] = outside;
  m["ratio"] = outside > 0.0 ? in / outside : std::numeric_limits<double>::infinity();
}

Json base_report(const ExperimentConfig& cfg, const std::string& stage) {
  Json config = to_json(cfg);
  config.erase("output_dir");
  return Json{{"version", VOXFUSE_VERSION},
              {"stage", stage},
              {"seed", cfg.seed},
              {"config_hash", config_hash(cfg)},
              {"config", config},
              {"metrics", Json::object()}};
}

}  // namespace

// --- config ------------------------------------------------------------------------------------------

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  Section root(j, "");
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);
  root.read("checkpoint", c.checkpoint);
  root.read("gradcheck_step", c.gradcheck_step);
  {
    Section s = root.sub("schedule");
    s.read("steps", c.schedule.steps);
    s.read("beta_min", c.schedule.beta_min);
    s.read("beta_max", c.schedule.beta_max);
    s.read("eq_weighting", c.schedule.eq_weighting);
    s.finish();
  }
  {
    Section s = root.sub("scene");
    s.read("count", c.scene.count);
    s.read("blobs", c.scene.blobs);
    s.read("grid_resolution", c.scene.grid_resolution);
    s.read("channels", c.scene.channels);
    s.read("image_size", c.scene.image_size);
    s.read("low_res_factor", c.scene.low_res_factor);
    s.read("cameras", c.scene.cameras);
    s.read("radius", c.scene.radius);
    s.read("elevation", c.scene.elevation);
    s.read("fov", c.scene.fov);
    s.read("samples", c.scene.samples);
    s.finish();
  }
  {
    Section s = root.sub("model");
    s.read("grid_resolution", c.model.grid_resolution);
    s.read("channels", c.model.channels);
    s.read("volume_width", c.model.volume_width);
    s.read("superres_width", c.model.superres_width);
    s.read("encoder_width", c.model.encoder_width);
    s.read("accumulator_hidden", c.model.accumulator_hidden);
    s.read("decoder_hidden", c.model.decoder_hidden);
    s.read("embedding", c.model.embedding);
    s.read("zero_init_heads", c.model.zero_init_heads);
    s.finish();
  }
  {
    Section s = root.sub("train");
    s.read("steps", c.train.steps);
    s.read("learning_rate", c.train.learning_rate);
    s.read("source_frames", c.train.source_frames);
    s.read("target_frames", c.train.target_frames);
    s.read("empty_probability", c.train.empty_probability);
    s.read("couple_superres", c.train.couple_superres);
    s.read("plateau_window", c.train.plateau_window);
    s.read("log_every", c.train.log_every);
    s.finish();
  }
  {
    Section s = root.sub("distill");
    s.read("resolution", c.distill.resolution);
    s.read("initial_resolution", c.distill.initial_resolution);
    s.read("steps", c.distill.steps);
    s.read("learning_rate", c.distill.learning_rate);
    s.read("patch", c.distill.patch);
    s.read("batch_cameras", c.distill.batch_cameras);
    s.read("tiles_per_camera", c.distill.tiles_per_camera);
    s.read("k", c.distill.k);
    s.read("loss", c.distill.loss);
    s.read("bank", c.distill.bank);
    s.read("corrupt_probability", c.distill.corrupt_probability);
    s.read("corrupt_size", c.distill.corrupt_size);
    s.read("heldout", c.distill.heldout);
    s.read("heldout_elevation", c.distill.heldout_elevation);
    s.finish();
  }
  {
    Section s = root.sub("heatmap");
    s.read("k", c.heatmap.k);
    s.read("camera", c.heatmap.camera);
    s.read("mask_size", c.heatmap.mask_size);
    s.read("noise", c.heatmap.noise);
    s.finish();
  }
  root.finish();
  return c;
}

Json to_json(const ExperimentConfig& c) {
  return Json{
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"checkpoint", c.checkpoint},
      {"gradcheck_step", c.gradcheck_step},
      {"schedule",
       {{"steps", c.schedule.steps},
        {"beta_min", c.schedule.beta_min},
        {"beta_max", c.schedule.beta_max},
        {"eq_weighting", c.schedule.eq_weighting}}},
      {"scene",
       {{"count", c.scene.count},
        {"blobs", c.scene.blobs},
        {"grid_resolution", c.scene.grid_resolution},
        {"channels", c.scene.channels},
        {"image_size", c.scene.image_size},
        {"low_res_factor", c.scene.low_res_factor},
        {"cameras", c.scene.cameras},
        {"radius", c.scene.radius},
        {"elevation", c.scene.elevation},
        {"fov", c.scene.fov},
        {"samples", c.scene.samples}}},
      {"model",
       {{"grid_resolution", c.model.grid_resolution},
        {"channels", c.model.channels},
        {"volume_width", c.model.volume_width},
        {"superres_width", c.model.superres_width},
        {"encoder_width", c.model.encoder_width},
        {"accumulator_hidden", c.model.accumulator_hidden},
        {"decoder_hidden", c.model.decoder_hidden},
        {"embedding", c.model.embedding},
        {"zero_init_heads", c.model.zero_init_heads}}},
      {"train",
       {{"steps", c.train.steps},
        {"learning_rate", c.train.learning_rate},
        {"source_frames", c.train.source_frames},
        {"target_frames", c.train.target_frames},
        {"empty_probability", c.train.empty_probability},
        {"couple_superres", c.train.couple_superres},
        {"plateau_window", c.train.plateau_window},
        {"log_every", c.train.log_every}}},
      {"distill",
       {{"resolution", c.distill.resolution},
        {"initial_resolution", c.distill.initial_resolution},
        {"steps", c.distill.steps},
        {"learning_rate", c.distill.learning_rate},
        {"patch", c.distill.patch},
        {"batch_cameras", c.distill.batch_cameras},
        {"tiles_per_camera", c.distill.tiles_per_camera},
        {"k", c.distill.k},
        {"loss", c.distill.loss},
        {"bank", c.distill.bank},
        {"corrupt_probability", c.distill.corrupt_probability},
        {"corrupt_size", c.distill.corrupt_size},
        {"heldout", c.distill.heldout},
        {"heldout_elevation", c.distill.heldout_elevation}}},
      {"heatmap",
       {{"k", c.heatmap.k}, {"camera", c.heatmap.camera}, {"mask_size", c.heatmap.mask_size}, {"noise", c.heatmap.noise}}},
  };
}

ExperimentConfig load_config(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ValidationError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

void validate_config(const ExperimentConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError(what);
  };
  need(c.schedule.steps >= 1, "schedule.steps must be >= 1");
  need(c.schedule.beta_min > 0.0 && c.schedule.beta_min <= c.schedule.beta_max && c.schedule.beta_max < 1.0,
       "schedule needs 0 < beta_min <= beta_max < 1");
  need(c.scene.count >= 1 && c.scene.blobs >= 0, "scene.count must be >= 1 and scene.blobs >= 0");
  need(c.scene.cameras >= 1 && c.scene.samples >= 1, "scene needs cameras >= 1 and samples >= 1");
  need(c.scene.image_size >= 2 && c.scene.low_res_factor >= 1 && c.scene.image_size % c.scene.low_res_factor == 0,
       "scene.image_size must be a multiple of scene.low_res_factor");
  need(c.model.grid_resolution >= 4 && c.model.grid_resolution % 4 == 0, "model.grid_resolution must be a multiple of 4");
  need(c.model.channels >= 4 && c.scene.channels == c.model.channels, "scene.channels must equal model.channels (>= 4)");
  need(c.model.embedding >= 2 && c.model.embedding % 2 == 0, "model.embedding must be even");
  need(c.train.steps >= 0 && c.train.log_every >= 1 && c.train.plateau_window >= 1, "invalid train step settings");
  need(c.train.learning_rate > 0.0 && c.distill.learning_rate > 0.0, "learning rates must be positive");
  need(c.distill.initial_resolution >= 2 && c.distill.initial_resolution <= c.distill.resolution,
       "distill.initial_resolution must lie in [2, distill.resolution]");
  need(c.distill.resolution == c.scene.grid_resolution, "distill.resolution must equal scene.grid_resolution");
  need(c.distill.k >= 1 && c.distill.patch >= 1 && c.distill.steps >= 0, "invalid distill settings");
  need(c.distill.heldout >= 1, "distill.heldout must be >= 1");
  need(c.heatmap.k >= 1 && c.heatmap.camera >= 0 && c.heatmap.camera < c.scene.cameras, "invalid heatmap settings");
  need(c.gradcheck_step > 0.0, "gradcheck_step must be positive");
  parse_distill_loss(c.distill.loss);
  if (!c.checkpoint.empty() && !fs::exists(c.checkpoint)) throw ValidationError("checkpoint " + c.checkpoint + " does not exist");
  need(!c.output_dir.empty(), "output_dir must not be empty");
}

std::string config_hash(const ExperimentConfig& cfg) {
  Json j = to_json(cfg);
  j.erase("output_dir");
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return iso_hex(h);
}

void configure_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

void validate_report(const Json& report) {
  if (!report.is_object()) throw ValidationError("report is not a JSON object");
  for (const char* key : {"version", "stage", "seed", "config_hash"}) {
    if (!report.contains(key) || report.at(key).is_null()) throw ValidationError(std::string("report lacks '") + key + "'");
  }
  if (!report.at("config_hash").is_string() || report.at("config_hash").get<std::string>().size() != 16) {
    throw ValidationError("report config_hash is malformed");
  }
  if (!report.at("seed").is_number_integer()) throw ValidationError("report seed is not an integer");
}

Json run_experiment(const ExperimentConfig& cfg, const std::string& stage) {
  validate_config(cfg);
  const auto& stages = experiment_stages();
  if (std::find(stages.begin(), stages.end(), stage) == stages.end()) throw ValidationError("unknown stage '" + stage + "'");
  const fs::path out = cfg.output_dir;
  if (stage == "report") {
    const Json report = Json::parse(read_text(out / "report.json"));
    validate_report(report);
    return report;
  }
  fs::create_directories(out);
  DirectoryLock lock(out);
  Json report = base_report(cfg, stage);
  const auto start = std::chrono::steady_clock::now();
  auto finish = [&](const std::string& status) {
    report["status"] = status;
    write_text(out / "report.json", report.dump(2) + "\n");
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_text(out / "timings.json", Json{{"stage", stage}, {"seconds", seconds}}.dump(2) + "\n");
  };
  try {
    Json& m = report["metrics"];
    if (stage == "make-scene") stage_make_scene(cfg, out, m);
    else if (stage == "gradcheck") stage_gradcheck(cfg, out, m);
    else if (stage == "train") stage_train(cfg, out, m);
    else if (stage == "sample") stage_sample(cfg, out, m);
    else if (stage == "distill") stage_distill(cfg, out, m);
    else if (stage == "ablate") stage_ablate(cfg, out, m);
    else if (stage == "heatmap") stage_heatmap(cfg, out, m);
  } catch (const std::exception& e) {
    report["error"] = e.what();
    finish("failed");
    throw;
  }
  finish("ok");
  return report;
}

// --- building blocks ---------------------------------------------------------------------------------

NoiseSchedule make_schedule(const ScheduleSettings& s) { return make_linear_schedule(s.steps, s.beta_min, s.beta_max); }

SceneSpec scene_spec(const ExperimentConfig& cfg, std::uint64_t scene_seed) {
  Rng rng(scene_seed * 0x9e3779b97f4a7c15ULL + 17);
  SceneSpec spec;
  spec.blobs = random_blobs(cfg.scene.blobs, rng);
  spec.grid_resolution = cfg.scene.grid_resolution;
  spec.channels = cfg.scene.channels;
  spec.ring = RingSpec{static_cast<int>(cfg.scene.cameras), cfg.scene.radius, cfg.scene.elevation, 0.0, cfg.scene.fov};
  spec.image_size = cfg.scene.image_size;
  spec.low_res_factor = cfg.scene.low_res_factor;
  spec.render = scene_render(cfg);
  spec.seed = scene_seed;
  return spec;
}

std::vector<SyntheticScene> make_training_scenes(const ExperimentConfig& cfg) {
  std::vector<SyntheticScene> out;
  for (Index i = 0; i < cfg.scene.count; ++i) out.push_back(gen_synthetic_scene(scene_spec(cfg, cfg.seed * 1000 + static_cast<std::uint64_t>(i))));
  return out;
}

std::vector<Camera> heldout_cameras(const ExperimentConfig& cfg) {
  const double offset = std::numbers::pi / static_cast<double>(cfg.scene.cameras);
  RingSpec ring{static_cast<int>(cfg.distill.heldout), cfg.scene.radius, cfg.distill.heldout_elevation, offset, cfg.scene.fov};
  return camera_ring(ring, cfg.scene.image_size, cfg.scene.image_size);
}

HypothesisBank oracle_bank(const SyntheticScene& scene, Index k) {
  HypothesisBank bank;
  for (std::size_t c = 0; c < scene.views.frames.size(); ++c) {
    bank.cameras.push_back(scene.views.frames[c].camera);
    bank.hypotheses.emplace_back(static_cast<std::size_t>(k), scene.views.frames[c].image);
    bank.conditioning.push_back(scene.views.low_res[c].image);
  }
  bank.validate();
  return bank;
}

HypothesisBank corrupted_bank(const SyntheticScene& scene, Index k, Index patch, double probability, Index size,
                              Rng& rng) {
  HypothesisBank bank = oracle_bank(scene, k);
  const Index H = bank.height(), W = bank.width();
  const Index rows = (H + patch - 1) / patch, cols = (W + patch - 1) / patch;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& stack : bank.hypotheses) {
    for (Index ty = 0; ty < rows; ++ty)
      for (Index tx = 0; tx < cols; ++tx) {
        const Index clean = std::uniform_int_distribution<Index>(0, k - 1)(rng);
        const Index th = std::min(patch, H - ty * patch), tw = std::min(patch, W - tx * patch);
        const Index sh = std::min(size, th), sw = std::min(size, tw);
        for (Index j = 0; j < k; ++j) {
          if (j == clean || u(rng) >= probability) continue;
          const Index y0 = ty * patch + std::uniform_int_distribution<Index>(0, th - sh)(rng);
          const Index x0 = tx * patch + std::uniform_int_distribution<Index>(0, tw - sw)(rng);
          const double color[3] = {u(rng), u(rng), u(rng)};
          Tensor& img = stack[static_cast<std::size_t>(j)];
          for (Index y = y0; y < y0 + sh; ++y)
            for (Index x = x0; x < x0 + sw; ++x)
              for (Index c = 0; c < 3; ++c) img[(y * W + x) * 3 + c] = color[c];
        }
      }
  }
  return bank;
}

Tensor center_mask(Index height, Index width, Index size) {
  Tensor mask({height, width});
  const Index y0 = (height - size) / 2, x0 = (width - size) / 2;
  for (Index y = std::max<Index>(0, y0); y < std::min(height, y0 + size); ++y)
    for (Index x = std::max<Index>(0, x0); x < std::min(width, x0 + size); ++x) mask[y * width + x] = 1.0;
  return mask;
}

HypothesisBank masked_bank(const SyntheticScene& scene, Index k, Index mask_size, double noise, Rng& rng) {
  HypothesisBank bank = oracle_bank(scene, k);
  const Tensor mask = center_mask(bank.height(), bank.width(), mask_size);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& stack : bank.hypotheses)
    for (Tensor& img : stack)
      for (Index i = 0; i < img.size(); ++i) {
        const double sd = mask[i / 3] > 0.5 ? 0.3 : noise;
        img[i] = std::clamp(img[i] + sd * n(rng), 0.0, 1.0);
      }
  return bank;
}

DistillEvaluation distill_and_evaluate(const ExperimentConfig& cfg, const SceneSpec& spec, const SyntheticScene& scene,
                                       const HypothesisBank& bank, DistillLoss loss, const SdsPrior& prior) {
  GridSpec low;
  low.resolution = cfg.distill.initial_resolution;
  low.channels = spec.channels;
  const VoxelGrid v0 = blob_grid(spec.blobs, low);
  DistillConfig dc;
  dc.resolution = cfg.distill.resolution;
  dc.patch = cfg.distill.patch;
  dc.steps = cfg.distill.steps;
  dc.learning_rate = cfg.distill.learning_rate;
  dc.batch_cameras = cfg.distill.batch_cameras;
  dc.tiles_per_camera = cfg.distill.tiles_per_camera;
  dc.loss = loss;
  dc.render = spec.render;
  dc.seed = cfg.seed;

  const std::vector<Camera> cams = heldout_cameras(cfg);
  const std::vector<Tensor> refs = render_views(scene, cams, spec.render);
  DistillEvaluation e;
  const VoxelGrid start = v0.spec.resolution == dc.resolution ? v0 : upsample_grid(v0, dc.resolution);
  e.initial_psnr = mean_of(evaluate_psnr(start, scene.decoder, cams, refs, spec.render));
  e.result = distill(v0, scene.decoder, bank, dc, prior);
  e.heldout_psnr = evaluate_psnr(e.result.grid, e.result.decoder, cams, refs, spec.render);
  e.mean_psnr = mean_of(e.heldout_psnr);
  return e;
}

}  // namespace vf
