// Command-line driver for the experiment stages.
//
// Exit codes: 0 success, 1 invalid config or arguments, 2 numerical failure, 3 I/O failure.

#include "voxfuse/error.hpp"
#include "voxfuse/experiment.hpp"
#include "voxfuse/io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::optional<std::string> checkpoint;
  bool print_config = false;
};

vf::ExperimentConfig resolve(const Options& o) {
  vf::Json j = o.config.empty() ? vf::Json::object() : vf::Json::parse(vf::read_text(o.config));
  if (!j.is_object()) throw vf::ValidationError(o.config + ": top level must be an object");
  for (const std::string& s : o.overrides) vf::apply_override(j, s);
  if (o.seed) j["seed"] = *o.seed;
  if (o.output) j["output_dir"] = *o.output;
  if (o.checkpoint) j["checkpoint"] = *o.checkpoint;
  return vf::config_from_json(j);
}

int run(const std::string& stage, const Options& o) {
  const vf::ExperimentConfig cfg = resolve(o);
  if (o.print_config) {
    std::cout << vf::to_json(cfg).dump(2) << "\n";
    return 0;
  }
  const vf::Json report = vf::run_experiment(cfg, stage);
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  vf::configure_allocator();
  CLI::App app{"voxfuse: 3D diffusion with 2D super-resolution and patch-remix distillation"};
  app.require_subcommand(1);
  Options o;
  std::string stage;
  for (const std::string& name : vf::experiment_stages()) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " stage");
    sub->add_option("-c,--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", o.overrides, "override a config key, e.g. --set distill.steps=500");
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("-o,--output", o.output, "output directory");
    sub->add_option("--checkpoint", o.checkpoint, "model checkpoint to load");
    sub->add_flag("--print-config", o.print_config, "print the resolved config and exit");
    sub->callback([&stage, name] { stage = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return run(stage, o);
  } catch (const vf::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const vf::IoError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return 3;
  } catch (const vf::Json::exception& e) {
    std::cerr << "invalid json: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 1;
  } catch (const std::logic_error& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
