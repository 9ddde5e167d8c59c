// Copyright 2026 The prior3d Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "prior3d/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "prior3d/random.hpp"

namespace prior3d {

namespace fs = std::filesystem;

MatchResult hungarian(const Eigen::MatrixXd& cost) {
  if (!cost.allFinite()) throw std::invalid_argument("hungarian: cost matrix has non-finite entries");
  MatchResult result;
  const bool transposed = cost.rows() > cost.cols();
  const Eigen::MatrixXd a = transposed ? Eigen::MatrixXd(cost.transpose()) : cost;
  const int n = static_cast<int>(a.rows()), m = static_cast<int>(a.cols());
  if (n == 0) return result;

  // Shortest augmenting paths with row/column potentials (1-based).
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const int row = p[j] - 1, col = j - 1;
    result.pairs.emplace_back(transposed ? col : row, transposed ? row : col);
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  for (const auto& [r, c] : result.pairs) result.total_cost += cost(r, c);
  return result;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("training config: " + msg); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(base_lr >= 0) || !(weight_decay >= 0)) fail("learning rate and weight decay must be >= 0");
  if (!(weights.cls >= 0) || !(weights.box >= 0)) fail("loss weights must be >= 0");
  if (!(focal.alpha >= 0 && focal.alpha <= 1) || !(focal.gamma >= 0)) fail("focal alpha in [0,1], gamma >= 0");
  if (overfit < 0 || val_every < 0 || val_limit < 0) fail("overfit, val_every and val_limit must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"base_lr", c.base_lr},
          {"weight_decay", c.weight_decay},
          {"lambda_cls", c.weights.cls},
          {"lambda_box", c.weights.box},
          {"focal_alpha", c.focal.alpha},
          {"focal_gamma", c.focal.gamma},
          {"overfit", c.overfit},
          {"val_every", c.val_every},
          {"val_limit", c.val_limit}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"epochs",      "batch_size",  "seed",       "base_lr",
                                              "weight_decay", "lambda_cls", "lambda_box", "focal_alpha",
                                              "focal_gamma", "overfit",     "val_every",  "val_limit"};
  if (!j.is_object()) throw std::invalid_argument("training: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("training: unknown key '" + key + "'");
  }
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.weights.cls = j.value("lambda_cls", c.weights.cls);
  c.weights.box = j.value("lambda_box", c.weights.box);
  c.focal.alpha = j.value("focal_alpha", c.focal.alpha);
  c.focal.gamma = j.value("focal_gamma", c.focal.gamma);
  c.overfit = j.value("overfit", c.overfit);
  c.val_every = j.value("val_every", c.val_every);
  c.val_limit = j.value("val_limit", c.val_limit);
  return c;
}

Eigen::Matrix<double, 1, kBoxParams> box_params(const Cuboid& c) {
  Eigen::Matrix<double, 1, kBoxParams> p;
  p << c.center.x(), c.center.y(), c.center.z(), c.extents.x(), c.extents.y(), c.extents.z(), std::sin(c.yaw),
      std::cos(c.yaw);
  return p;
}

namespace {

template <typename T>
Eigen::Matrix<double, 1, kBoxParams> predicted_params(const DetectionOutput<T>& out, int i) {
  Eigen::Matrix<double, 1, kBoxParams> p;
  for (int k = 0; k < 3; ++k) {
    p[k] = out.centers.at(i, k);
    p[3 + k] = out.extents.at(i, k);
  }
  p[6] = out.yaw.at(i, 0);
  p[7] = out.yaw.at(i, 1);
  return p;
}

double sigmoid_d(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

template <typename T>
Eigen::MatrixXd match_cost(const DetectionOutput<T>& out, const std::vector<Cuboid>& gts, const LossWeights& w) {
  const int n = out.size(), m = static_cast<int>(gts.size());
  Eigen::MatrixXd cost(n, m);
  std::vector<Eigen::Matrix<double, 1, kBoxParams>> targets(m);
  for (int j = 0; j < m; ++j) targets[j] = box_params(gts[j]);
  for (int i = 0; i < n; ++i) {
    const auto pred = predicted_params(out, i);
    for (int j = 0; j < m; ++j) {
      const double prob = sigmoid_d(out.logits.at(i, static_cast<int>(gts[j].label)));
      cost(i, j) = w.cls * (1.0 - prob) + w.box * (pred - targets[j]).cwiseAbs().sum();
    }
  }
  return cost;
}

template <typename T>
LossBreakdown<T> set_loss(const std::vector<DetectionOutput<T>>& blocks, const std::vector<Cuboid>& gts,
                          const LossWeights& weights, const FocalParams& focal) {
  if (blocks.empty()) throw std::invalid_argument("set_loss: no decoder outputs");
  LossBreakdown<T> out;
  const T norm = T(1) / static_cast<T>(std::max<std::size_t>(1, gts.size()));
  std::vector<Tensor<T>> totals;
  for (const auto& block : blocks) {
    const int n = block.size();
    MatchResult match;
    if (!gts.empty()) match = hungarian(match_cost(block, gts, weights));
    RowMatrix<T> targets = RowMatrix<T>::Zero(n, kNumClasses);
    for (const auto& [q, g] : match.pairs) targets(q, static_cast<int>(gts[g].label)) = 1;
    const auto cls = scale(sigmoid_focal_loss(block.logits, targets, static_cast<T>(focal.alpha),
                                              static_cast<T>(focal.gamma)),
                           norm);
    auto total = scale(cls, static_cast<T>(weights.cls));
    out.cls += cls.item();
    if (!match.pairs.empty()) {
      std::vector<int> rows;
      Vec<T> target(static_cast<Eigen::Index>(match.pairs.size()) * kBoxParams);
      for (std::size_t k = 0; k < match.pairs.size(); ++k) {
        rows.push_back(match.pairs[k].first);
        target.segment(static_cast<Eigen::Index>(k) * kBoxParams, kBoxParams) =
            box_params(gts[match.pairs[k].second]).transpose().template cast<T>();
      }
      const std::span<const int> idx(rows);
      const auto pred = concat<T>({gather_rows(block.centers, idx), gather_rows(block.extents, idx),
                                   gather_rows(block.yaw, idx)},
                                  1);
      const int matched = static_cast<int>(rows.size());
      const auto box = scale(sum(abs(sub(pred, Tensor<T>::constant({matched, kBoxParams}, std::move(target))))), norm);
      out.box += box.item();
      total = add(total, scale(box, static_cast<T>(weights.box)));
    }
    totals.push_back(total);
    out.matches.push_back(std::move(match));
  }
  const T inv_blocks = T(1) / static_cast<T>(blocks.size());
  Tensor<T> acc = totals.front();
  for (std::size_t b = 1; b < totals.size(); ++b) acc = add(acc, totals[b]);
  out.total = scale(acc, inv_blocks);
  out.cls /= static_cast<double>(blocks.size());
  out.box /= static_cast<double>(blocks.size());
  return out;
}

// ---- learning curve -------------------------------------------------------------

namespace {

constexpr const char* kCurveHeader = "epoch,loss,cls,box,lr,val_ap_vehicle,val_ap_human,val_ap_mean,seconds";

double parse_field(const std::string& s, const fs::path& path, int line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(path.string() + ":" + std::to_string(line) + ": malformed number '" + s + "'");
  }
}

}  // namespace

void LearningCurve::write_csv(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kCurveHeader << '\n' << std::setprecision(9);
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.loss << ',' << e.cls << ',' << e.box << ',' << e.lr << ',' << e.val_ap_vehicle << ','
        << e.val_ap_human << ',' << e.val_ap_mean << ',' << e.seconds << '\n';
  }
}

LearningCurve LearningCurve::read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCurveHeader) {
    throw std::invalid_argument(path.string() + ":1: expected header '" + std::string(kCurveHeader) + "'");
  }
  LearningCurve curve;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 9) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected 9 fields, got " +
                                  std::to_string(fields.size()));
    }
    EpochRecord r;
    r.epoch = static_cast<int>(parse_field(fields[0], path, lineno));
    r.loss = parse_field(fields[1], path, lineno);
    r.cls = parse_field(fields[2], path, lineno);
    r.box = parse_field(fields[3], path, lineno);
    r.lr = parse_field(fields[4], path, lineno);
    r.val_ap_vehicle = parse_field(fields[5], path, lineno);
    r.val_ap_human = parse_field(fields[6], path, lineno);
    r.val_ap_mean = parse_field(fields[7], path, lineno);
    r.seconds = parse_field(fields[8], path, lineno);
    if (!curve.epochs.empty() && r.epoch <= curve.epochs.back().epoch) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": epochs must increase");
    }
    curve.epochs.push_back(r);
  }
  return curve;
}

// ---- training loop ----------------------------------------------------------------

FrameSource FrameSource::of(const std::vector<Frame>& frames) {
  return {frames.size(), [&frames](std::size_t i) { return frames[i]; }};
}

namespace {

template <typename T>
std::vector<Vec<T>> snapshot(const Detector<T>& model) {
  std::vector<Vec<T>> out;
  for (const auto& [name, t] : model.parameters()) out.push_back(t.value());
  return out;
}

// Matching needs finite costs; NaN outputs count as a non-finite loss.
template <typename T>
bool outputs_finite(const std::vector<DetectionOutput<T>>& blocks) {
  for (const auto& b : blocks) {
    for (const auto* t : {&b.logits, &b.centers, &b.extents, &b.yaw}) {
      if (!t->value().allFinite()) return false;
    }
  }
  return true;
}

template <typename T>
void restore(Detector<T>& model, const std::vector<Vec<T>>& values) {
  auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].second.mutable_value() = values[i];
}

}  // namespace

template <typename T>
TrainResult train(Detector<T>& model, const FrameSource& train_frames, const std::vector<Frame>& val_frames,
                  const TrainConfig& config, const fs::path& out_dir, const nlohmann::json& sidecar) {
  config.validate();
  if (train_frames.size == 0) throw std::invalid_argument("train: empty training split");
  const std::size_t n = config.overfit > 0 ? std::min<std::size_t>(config.overfit, train_frames.size)
                                           : train_frames.size;
  std::vector<Frame> val(val_frames.begin(),
                         config.val_limit > 0 && static_cast<std::size_t>(config.val_limit) < val_frames.size()
                             ? val_frames.begin() + config.val_limit
                             : val_frames.end());

  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((n + config.batch_size - 1) / config.batch_size);
  AdamWConfig opt_cfg;
  opt_cfg.base_lr = config.base_lr;
  opt_cfg.weight_decay = config.weight_decay;
  opt_cfg.total_steps = steps_per_epoch * config.epochs;
  AdamW<T> opt(model.parameter_list(), opt_cfg);

  if (!out_dir.empty()) fs::create_directories(out_dir);
  TrainResult result;
  auto kept = snapshot(model);
  bool have_best = false, saved = false;

  std::vector<std::size_t> order(n);
  for (int epoch = 1; epoch <= config.epochs && !result.aborted; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < n && !result.aborted; b += config.batch_size) {
      const std::size_t end = std::min(n, b + config.batch_size);
      const T weight = T(1) / static_cast<T>(end - b);
      opt.zero_grad();
      for (std::size_t k = b; k < end; ++k) {
        const std::size_t idx = order[k];
        const Frame frame = train_frames.get(idx);
        const auto fwd = model.forward(frame);
        if (!outputs_finite(fwd.blocks)) {
          result.aborted = true;
          result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch);
          break;
        }
        const auto loss = set_loss(fwd.blocks, visible_gts(frame), config.weights, config.focal);
        const double value = loss.total.item();
        if (!std::isfinite(value)) {
          result.aborted = true;
          result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch);
          break;
        }
        rec.loss += value;
        rec.cls += loss.cls;
        rec.box += loss.box;
        backward(scale(loss.total, weight));
      }
      if (result.aborted) break;
      rec.lr = opt.current_lr();
      if (opt.step() == StepStatus::kNonFiniteGradient) {
        result.aborted = true;
        result.abort_reason = "non-finite gradient at epoch " + std::to_string(epoch);
      }
    }
    if (result.aborted) break;
    rec.loss /= static_cast<double>(n);
    rec.cls /= static_cast<double>(n);
    rec.box /= static_cast<double>(n);

    constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
    rec.val_ap_vehicle = rec.val_ap_human = rec.val_ap_mean = kNaN;
    const bool validate =
        !val.empty() && config.val_every > 0 && (epoch % config.val_every == 0 || epoch == config.epochs);
    if (validate) {
      const auto report = evaluate_run(model, val, EvalConfig{});
      const auto& cls = report.ap_iou.classes;
      rec.val_ap_vehicle = cls[0].present ? cls[0].ap : kNaN;
      rec.val_ap_human = cls[1].present ? cls[1].ap : kNaN;
      rec.val_ap_mean = report.ap_iou.mean();
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.curve.epochs.push_back(rec);

    // Without validation every epoch replaces the retained parameters.
    bool improve = val.empty() || config.val_every == 0;
    if (validate) {
      const double score = std::isnan(rec.val_ap_mean) ? -1.0 : rec.val_ap_mean;
      improve = !have_best || score > result.best_val;
      if (improve) result.best_val = score;
    }
    if (improve) {
      have_best = true;
      result.best_epoch = epoch;
      kept = snapshot(model);
      if (!out_dir.empty()) {
        model.save(out_dir / kCheckpointDir, {{"epoch", epoch}, {"val_ap_mean", result.best_val}});
        saved = true;
      }
    }
    if (config.log) {
      std::cerr << "epoch " << epoch << "/" << config.epochs << " loss " << rec.loss << " (cls " << rec.cls
                << ", box " << rec.box << ") lr " << rec.lr;
      if (validate) std::cerr << " val AP " << rec.val_ap_mean;
      std::cerr << " " << std::fixed << std::setprecision(1) << rec.seconds << "s" << std::defaultfloat
                << std::setprecision(6) << '\n';
    }
  }

  restore(model, kept);
  if (!out_dir.empty()) {
    if (!saved) model.save(out_dir / kCheckpointDir, {{"epoch", result.best_epoch}, {"val_ap_mean", nullptr}});
    result.curve.write_csv(out_dir / kCurveFile);
    nlohmann::json side = sidecar;
    side["training"] = to_json(config);
    side["model"] = to_json(model.config());
    side["result"] = {{"best_epoch", result.best_epoch},
                      {"aborted", result.aborted},
                      {"abort_reason", result.abort_reason},
                      {"epochs_completed", result.curve.epochs.size()},
                      {"train_frames", n}};
    write_json_file(out_dir / kRunConfigFile, side);
  }
  return result;
}

template <typename T>
AssignmentCensus footnote_assignment_probe(const Detector<T>& model, const Frame& frame, const LossWeights& weights,
                                           double radius) {
  NoGradGuard guard;
  const auto fwd = model.forward(frame);
  const auto& out = fwd.blocks.back();
  std::set<int> visible;
  for (const auto& boxes : frame.clean_boxes) {
    for (const auto& b : boxes) {
      if (b.source >= 0) visible.insert(b.source);
    }
  }
  std::vector<int> gt_index(visible.begin(), visible.end());
  std::vector<Cuboid> gts;
  for (int g : gt_index) gts.push_back(frame.scene.cuboids.at(g));

  AssignmentCensus census;
  census.total_queries = out.size();
  MatchResult match;
  if (!gts.empty()) match = hungarian(match_cost(out, gts, weights));
  std::vector<int> assigned(out.size(), -1);
  for (const auto& [q, g] : match.pairs) assigned[q] = g;
  census.positives = static_cast<int>(match.pairs.size());
  census.negatives = census.total_queries - census.positives;

  for (std::size_t j = 0; j < gts.size(); ++j) {
    GtCensus c;
    c.gt = gt_index[j];
    for (int q = 0; q < out.size(); ++q) {
      if (assigned[q] == static_cast<int>(j)) ++c.matched_queries;
      const QuerySource& src = fwd.queries.sources[q];
      bool on_ray = false;
      if (src.kind == QueryKind::kRay) {
        const auto& boxes = frame.views.at(src.camera).boxes;
        on_ray = src.box < static_cast<int>(boxes.size()) && boxes[src.box].source == c.gt;
      }
      if (on_ray) {
        ++c.ray_queries;
        if (assigned[q] < 0) ++c.ray_negatives;
      }
      if (assigned[q] < 0) {
        const Eigen::Vector2d center(out.centers.at(q, 0), out.centers.at(q, 1));
        if ((center - gts[j].center.head<2>()).norm() <= radius) ++c.nearby_negatives;
      }
    }
    census.per_gt.push_back(c);
  }
  return census;
}

template Eigen::MatrixXd match_cost<float>(const DetectionOutput<float>&, const std::vector<Cuboid>&,
                                           const LossWeights&);
template Eigen::MatrixXd match_cost<double>(const DetectionOutput<double>&, const std::vector<Cuboid>&,
                                            const LossWeights&);
template LossBreakdown<float> set_loss<float>(const std::vector<DetectionOutput<float>>&, const std::vector<Cuboid>&,
                                              const LossWeights&, const FocalParams&);
template LossBreakdown<double> set_loss<double>(const std::vector<DetectionOutput<double>>&,
                                                const std::vector<Cuboid>&, const LossWeights&, const FocalParams&);
template TrainResult train<float>(Detector<float>&, const FrameSource&, const std::vector<Frame>&,
                                  const TrainConfig&, const fs::path&, const nlohmann::json&);
template TrainResult train<double>(Detector<double>&, const FrameSource&, const std::vector<Frame>&,
                                   const TrainConfig&, const fs::path&, const nlohmann::json&);
template AssignmentCensus footnote_assignment_probe<float>(const Detector<float>&, const Frame&, const LossWeights&,
                                                           double);
template AssignmentCensus footnote_assignment_probe<double>(const Detector<double>&, const Frame&,
                                                            const LossWeights&, double);

}  // namespace prior3d
