#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "labelseg/commands.hpp"

namespace fs = std::filesystem;
using namespace labelseg;

namespace {

struct Overrides {
  std::string output;
  std::optional<std::uint64_t> seed;
  std::optional<int> members;
  bool no_tta = false;
};

RunConfig load_with_overrides(const std::string& path, const Overrides& o) {
  RunConfig c = load_run_config(path);
  if (!o.output.empty()) c.paths.output = o.output;
  if (o.seed) {
    c.job.train.seed = *o.seed;
    c.base_seed = *o.seed;
  }
  if (o.members) c.members = *o.members;
  if (o.no_tta) c.tta = false;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partially supervised 3D brain segmentation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides ov;
  std::string cases;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
    sub->add_option("--output", ov.output, "Output directory (overrides paths.output)");
  };

  auto* pre = app.add_subcommand("preprocess", "Register, skull-strip, normalize, and crop every case");
  add_common(pre);

  auto* train = app.add_subcommand("train", "Train an ensemble on pre-processed cases");
  add_common(train);
  train->add_option("--seed", ov.seed, "Base seed for splits, initialization, and augmentation");
  train->add_option("--members", ov.members, "Number of ensemble members");

  auto* predict = app.add_subcommand("predict", "Segment pre-processed cases in native space");
  add_common(predict);
  predict->add_option("--cases", cases, "Pre-processed manifest, or the directory holding it");
  predict->add_flag("--no-tta", ov.no_tta, "Disable flip test-time augmentation");

  std::string pred_dir, gt_dir, mapping = "feta_full", labels_file, eval_out;
  auto* eval = app.add_subcommand("evaluate", "Per-class Dice of predictions against ground truth");
  eval->add_option("--predictions", pred_dir, "Directory of predicted label volumes")->required();
  eval->add_option("--ground-truth", gt_dir, "Directory of ground-truth label volumes")->required();
  eval->add_option("--protocol", mapping, "Label-set mapping of the ground truth");
  eval->add_option("--labels", labels_file, "Additional label-set definitions (JSON)");
  eval->add_option("--output", eval_out, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (pre->parsed()) return cmd_preprocess(load_with_overrides(config_path, ov), std::cout);
    if (train->parsed()) return cmd_train(load_with_overrides(config_path, ov), std::cout);
    if (predict->parsed()) {
      std::optional<fs::path> c;
      if (!cases.empty()) c = cases;
      return cmd_predict(load_with_overrides(config_path, ov), c, std::cout);
    }
    if (eval->parsed()) {
      LabelRegistry registry = LabelRegistry::with_defaults();
      if (!labels_file.empty()) registry.load_file(labels_file);
      return cmd_evaluate(pred_dir, gt_dir, mapping, eval_out, registry, std::cout);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
