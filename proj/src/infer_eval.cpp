#include "labelseg/infer_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "labelseg/resample.hpp"

namespace labelseg {

nn::Tensor tta_predict(const Network& net, const nn::Tensor& x, bool enabled) {
  if (net.mode() != NetworkMode::kEval) throw ValidationError("tta_predict requires eval mode");
  if (!enabled) return net.forward(x).front();
  std::vector<double> acc;
  nn::Tensor shape_ref;
  for (unsigned axes = 0; axes < 8; ++axes) {
    nn::Tensor p = net.forward(nn::flip(x, axes)).front();
    p = nn::flip(p, axes);
    if (acc.empty()) {
      acc.assign(p.data.size(), 0.0);
      shape_ref = nn::Tensor(p.channels, p.shape);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.data[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) shape_ref.data[i] = static_cast<float>(acc[i] / 8.0);
  return shape_ref;
}

std::vector<LoadedMember> load_ensemble(const EnsembleManifest& manifest) {
  std::vector<LoadedMember> out;
  for (const auto& m : manifest.valid_members()) {
    if (!std::filesystem::exists(m.checkpoint)) {
      throw IoError("ensemble member " + std::to_string(m.index) + ": checkpoint not found: " +
                    m.checkpoint.string());
    }
    LoadedCheckpoint ck;
    try {
      ck = load_checkpoint(m.checkpoint);
    } catch (const Error& e) {
      throw IoError("ensemble member " + std::to_string(m.index) + " (" + m.checkpoint.string() +
                    "): " + e.what());
    }
    const UNetConfig& c = ck.network->config();
    if (c.num_classes != manifest.num_classes || c.patch_shape != manifest.patch_shape) {
      throw ValidationError("ensemble member " + std::to_string(m.index) +
                            " disagrees with the manifest's num_classes/patch_shape");
    }
    ck.network->set_mode(NetworkMode::kEval);
    out.push_back({m.seed, m.checkpoint, std::move(ck.network)});
  }
  if (out.empty()) throw ValidationError("ensemble has no loadable members");
  return out;
}

nn::Tensor ensemble_predict(std::vector<LoadedMember> members, const nn::Tensor& x, bool tta) {
  if (members.empty()) throw ValidationError("ensemble_predict: no members");
  std::sort(members.begin(), members.end(), [](const LoadedMember& a, const LoadedMember& b) {
    if (a.seed != b.seed) return a.seed < b.seed;
    return a.path < b.path;
  });
  std::vector<double> acc;
  nn::Tensor out;
  for (const auto& m : members) {
    const nn::Tensor p = tta_predict(*m.network, x, tta);
    if (acc.empty()) {
      acc.assign(p.data.size(), 0.0);
      out = nn::Tensor(p.channels, p.shape);
    } else if (p.data.size() != acc.size()) {
      throw ShapeError("ensemble members produce different output shapes");
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.data[i];
  }
  const auto n = static_cast<double>(members.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<float>(acc[i] / n);
  return out;
}

ProbabilityMap to_probability_map(const nn::Tensor& t, const Geometry& geometry) {
  ProbabilityMap m(t.channels, t.shape, geometry);
  m.data = t.data;
  return m;
}

LabelVolume argmax_labels(const ProbabilityMap& probs) {
  LabelVolume out(probs.shape, probs.geometry, 0);
  const std::size_t n = probs.shape.size();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    float best_v = probs.data[i];
    for (int c = 1; c < probs.channels; ++c) {
      const float v = probs.data[static_cast<std::size_t>(c) * n + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.data[i] = best;
  }
  return out;
}

LabelVolume postprocess(const ProbabilityMap& patch_probs, const PatchGeometry& g) {
  return postprocess(patch_probs, g, g.native_shape, g.native_geometry);
}

LabelVolume postprocess(const ProbabilityMap& patch_probs, const PatchGeometry& g, const Shape3& native_shape,
                        const Geometry& native_geometry) {
  if (!(patch_probs.shape == g.patch_shape)) {
    throw ShapeError("postprocess: probability map " + to_string(patch_probs.shape) +
                     " does not match the recorded patch " + to_string(g.patch_shape));
  }
  const ProbabilityMap template_space = invert_crop_or_pad(patch_probs, g);
  const ProbabilityMap native =
      resample_linear(template_space, native_shape, native_geometry, g.transform.matrix());
  return argmax_labels(native);
}

double dice_score(const LabelVolume& pred, const LabelVolume& gt) {
  if (!(pred.shape == gt.shape)) {
    throw ShapeError("dice_score: shape " + to_string(pred.shape) + " vs " + to_string(gt.shape));
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, t = gt.data[i] != 0;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double class_dice(const LabelVolume& pred, const LabelVolume& gt, int cls) {
  LabelVolume p(pred.shape, pred.geometry), t(gt.shape, gt.geometry);
  for (std::size_t i = 0; i < pred.data.size(); ++i) p.data[i] = pred.data[i] == cls;
  for (std::size_t i = 0; i < gt.data.size(); ++i) t.data[i] = gt.data[i] == cls;
  return dice_score(p, t);
}

EvaluationReport evaluate_cases(const std::vector<EvaluationPair>& pairs, const LabelProtocol& protocol) {
  EvaluationReport r;
  for (const auto& leaf : protocol.leaf_classes) {
    if (leaf.id == protocol.background_id) continue;
    r.class_ids.push_back(leaf.id);
    r.class_names.push_back(leaf.name);
  }
  for (const auto& pr : pairs) {
    require_same_grid(pr.prediction, pr.ground_truth, "evaluate case '" + pr.case_id + "'");
    CaseEvaluation ce;
    ce.case_id = pr.case_id;
    for (int cls : r.class_ids) {
      const bool in_pred = std::find(pr.prediction.data.begin(), pr.prediction.data.end(), cls) !=
                           pr.prediction.data.end();
      const bool in_gt = std::find(pr.ground_truth.data.begin(), pr.ground_truth.data.end(), cls) !=
                         pr.ground_truth.data.end();
      ce.absent.push_back(!in_pred && !in_gt);
      ce.dice.push_back(class_dice(pr.prediction, pr.ground_truth, cls));
    }
    r.cases.push_back(std::move(ce));
  }
  for (std::size_t k = 0; k < r.class_ids.size(); ++k) {
    ClassSummary s;
    s.class_id = r.class_ids[k];
    s.name = r.class_names[k];
    s.n = static_cast<int>(r.cases.size());
    double sum = 0.0;
    for (const auto& c : r.cases) {
      sum += c.dice[k];
      s.absent += c.absent[k];
    }
    if (s.n > 0) {
      s.mean = sum / s.n;
      double sq = 0.0;
      for (const auto& c : r.cases) sq += (c.dice[k] - s.mean) * (c.dice[k] - s.mean);
      s.sd = std::sqrt(sq / s.n);
    }
    r.summary.push_back(s);
  }
  return r;
}

void write_report(const EvaluationReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream table(dir / "dice_per_case.tsv");
  if (!table) throw IoError("cannot write report in " + dir.string());
  table.precision(10);
  table << "case_id";
  for (const auto& n : r.class_names) table << '\t' << n;
  table << "\tabsent\n";
  for (const auto& c : r.cases) {
    table << c.case_id;
    for (double d : c.dice) table << '\t' << d;
    std::string absent;
    for (std::size_t k = 0; k < c.absent.size(); ++k) {
      if (!c.absent[k]) continue;
      if (!absent.empty()) absent += ',';
      absent += r.class_names[k];
    }
    table << '\t' << (absent.empty() ? "-" : absent) << '\n';
  }
  for (const auto& u : r.unpaired) table << "# unpaired\t" << u << '\n';

  std::ofstream summary(dir / "dice_summary.tsv");
  if (!summary) throw IoError("cannot write report in " + dir.string());
  summary.precision(10);
  summary << "class\tmean\tsd\tN\tabsent\n";
  for (const auto& s : r.summary) {
    summary << s.name << '\t' << s.mean << '\t' << s.sd << '\t' << s.n << '\t' << s.absent << '\n';
  }
  summary << "# cases evaluated\t" << r.cases.size() << '\n';
  summary << "# unpaired\t" << r.unpaired.size() << '\n';
  for (const auto& u : r.unpaired) summary << "# unpaired\t" << u << '\n';
}

}  // namespace labelseg
