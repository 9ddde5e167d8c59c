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

#include "prior3d/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>

namespace prior3d {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

double json_number(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

void EvalConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("eval config: " + msg); };
  if (!(iou_threshold > 0 && iou_threshold <= 1)) fail("iou_threshold must be in (0, 1]");
  if (!(centroid_threshold > 0)) fail("centroid_threshold must be positive");
  if (!(max_range > 0)) fail("max_range must be positive");
  if (!(refpoint_radius >= 0)) fail("refpoint_radius must be non-negative");
  if (!(smear_score > 0 && smear_score < 1)) fail("smear_score must be in (0, 1)");
  if (!(smear_width > 0)) fail("smear_width must be positive");
  if (!(nms_iou > 0 && nms_iou <= 1)) fail("nms_iou must be in (0, 1]");
  if (jobs < 1) fail("jobs must be >= 1");
}

nlohmann::json to_json(const EvalConfig& c) {
  return {{"iou_threshold", c.iou_threshold}, {"centroid_threshold", c.centroid_threshold},
          {"max_range", c.max_range},         {"refpoint_radius", c.refpoint_radius},
          {"smear_score", c.smear_score},     {"smear_width", c.smear_width},
          {"nms", c.nms},                     {"nms_iou", c.nms_iou}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"iou_threshold", "centroid_threshold", "max_range", "refpoint_radius", "smear_score",
                  "smear_width", "nms", "nms_iou", "jobs"},
                 "eval");
  EvalConfig c;
  c.iou_threshold = j.value("iou_threshold", c.iou_threshold);
  c.centroid_threshold = j.value("centroid_threshold", c.centroid_threshold);
  c.max_range = j.value("max_range", c.max_range);
  c.refpoint_radius = j.value("refpoint_radius", c.refpoint_radius);
  c.smear_score = j.value("smear_score", c.smear_score);
  c.smear_width = j.value("smear_width", c.smear_width);
  c.nms = j.value("nms", c.nms);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.jobs = j.value("jobs", c.jobs);
  return c;
}

double APResult::mean() const {
  double total = 0;
  int n = 0;
  for (const auto& c : classes) {
    if (!c.present) continue;
    total += c.ap;
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : total / n;
}

APResult average_precision(const std::vector<FrameEval>& frames, MatchCriterion criterion, double threshold,
                           double max_range) {
  APResult result;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    const auto label = static_cast<ObjectClass>(cls);
    std::vector<std::vector<const Cuboid*>> gts(frames.size());
    int num_gt = 0;
    for (std::size_t f = 0; f < frames.size(); ++f) {
      for (const auto& g : frames[f].gts) {
        if (g.label == label && bev_range(g.center) <= max_range) gts[f].push_back(&g);
      }
      num_gt += static_cast<int>(gts[f].size());
    }
    ClassAP& out = result.classes[cls];
    out.num_gt = num_gt;
    if (num_gt == 0) continue;
    out.present = true;

    struct Entry {
      double score, tie;
      std::size_t frame, index;
    };
    std::vector<Entry> entries;
    for (std::size_t f = 0; f < frames.size(); ++f) {
      for (std::size_t i = 0; i < frames[f].detections.size(); ++i) {
        const Detection& d = frames[f].detections[i];
        if (d.box.label != label || bev_range(d.box.center) > max_range) continue;
        double tie = kInf;
        for (const Cuboid* g : gts[f]) tie = std::min(tie, centroid_distance_bev(d.box, *g));
        entries.push_back({d.score, tie, f, i});
      }
    }
    out.num_detections = static_cast<int>(entries.size());
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.tie != b.tie) return a.tie < b.tie;
      if (a.frame != b.frame) return a.frame < b.frame;
      return a.index < b.index;
    });

    std::vector<std::vector<bool>> used(frames.size());
    for (std::size_t f = 0; f < frames.size(); ++f) used[f].assign(gts[f].size(), false);
    int tp = 0, fp = 0;
    double prev_recall = 0, ap = 0;
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const Entry& e = entries[k];
      const Cuboid& box = frames[e.frame].detections[e.index].box;
      int best = -1;
      double best_value = criterion == MatchCriterion::kIoU ? -1.0 : kInf;
      for (std::size_t g = 0; g < gts[e.frame].size(); ++g) {
        if (used[e.frame][g]) continue;
        if (criterion == MatchCriterion::kIoU) {
          const double iou = bev_iou(box, *gts[e.frame][g]);
          if (iou >= threshold && iou > best_value) {
            best_value = iou;
            best = static_cast<int>(g);
          }
        } else {
          const double dist = centroid_distance_bev(box, *gts[e.frame][g]);
          if (dist <= threshold && dist < best_value) {
            best_value = dist;
            best = static_cast<int>(g);
          }
        }
      }
      if (best >= 0) {
        used[e.frame][best] = true;
        ++tp;
      } else {
        ++fp;
      }
      const bool group_end = k + 1 == entries.size() || entries[k + 1].score != e.score;
      if (!group_end) continue;
      const double recall = static_cast<double>(tp) / num_gt;
      const double precision = static_cast<double>(tp) / (tp + fp);
      out.curve.points.push_back({recall, precision, e.score});
      ap += (recall - prev_recall) * precision;
      prev_recall = recall;
    }
    out.ap = ap;
  }
  return result;
}

double RefPointStats::recall(double radius) const {
  if (distances.empty()) return 0.0;
  const auto hits = std::count_if(distances.begin(), distances.end(), [radius](double d) { return d <= radius; });
  return static_cast<double>(hits) / static_cast<double>(distances.size());
}

RefPointStats refpoint_recall(const std::vector<std::vector<Eigen::Vector3d>>& references,
                              const std::vector<std::vector<Cuboid>>& gts, double max_range) {
  if (references.size() != gts.size()) throw std::invalid_argument("refpoint_recall: frame count mismatch");
  RefPointStats stats;
  for (std::size_t f = 0; f < gts.size(); ++f) {
    if (references[f].empty()) stats.empty_queries = true;
    for (const auto& g : gts[f]) {
      if (bev_range(g.center) > max_range) continue;
      double best = kInf;
      for (const auto& p : references[f]) best = std::min(best, (p - g.center).norm());
      stats.distances.push_back(best);
    }
  }
  return stats;
}

double SmearingStats::mean() const {
  if (counts.empty()) return 0.0;
  return static_cast<double>(std::accumulate(counts.begin(), counts.end(), 0LL)) / static_cast<double>(counts.size());
}

int observing_camera(const std::vector<Camera>& cameras, const Eigen::Vector3d& point) {
  if (cameras.empty()) throw std::invalid_argument("observing_camera: no cameras");
  int best = -1;
  double best_cos = -2;
  for (std::size_t c = 0; c < cameras.size(); ++c) {
    if (!project_point(cameras[c], point).valid) continue;
    const double cosine = cameras[c].forward().dot((point - cameras[c].center()).normalized());
    if (cosine > best_cos) {
      best_cos = cosine;
      best = static_cast<int>(c);
    }
  }
  if (best >= 0) return best;
  double best_dist = kInf;
  for (std::size_t c = 0; c < cameras.size(); ++c) {
    const double dist = (cameras[c].center() - point).norm();
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<int>(c);
    }
  }
  return best;
}

SmearingStats smearing_index(const std::vector<FrameEval>& frames, const std::vector<std::vector<Camera>>& cameras,
                             double tau, double width, double max_range) {
  if (!(tau > 0 && tau < 1)) throw std::invalid_argument("smearing_index: tau must be in (0, 1)");
  if (!(width > 0)) throw std::invalid_argument("smearing_index: width must be positive");
  if (frames.size() != cameras.size()) throw std::invalid_argument("smearing_index: frame count mismatch");
  SmearingStats stats;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (const auto& g : frames[f].gts) {
      if (bev_range(g.center) > max_range) continue;
      const Camera& cam = cameras[f][observing_camera(cameras[f], g.center)];
      const Eigen::Vector2d origin = cam.center().head<2>();
      const Eigen::Vector2d to_gt = g.center.head<2>() - origin;
      int count = 0;
      if (to_gt.norm() > 0) {
        const Eigen::Vector2d dir = to_gt.normalized();
        for (const auto& d : frames[f].detections) {
          if (d.score < tau || bev_range(d.box.center) > max_range) continue;
          const Eigen::Vector2d rel = d.box.center.head<2>() - origin;
          const double along = rel.dot(dir);
          const double perp = std::abs(rel.x() * dir.y() - rel.y() * dir.x());
          if (along >= 0 && perp <= width) ++count;
        }
      }
      stats.counts.push_back(count);
    }
  }
  return stats;
}

std::vector<Detection> bev_nms(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : detections) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.box.label == d.box.label && bev_iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Cuboid> visible_gts(const Frame& frame) {
  std::set<int> seen;
  for (const auto& boxes : frame.clean_boxes) {
    for (const auto& b : boxes) {
      if (b.source >= 0) seen.insert(b.source);
    }
  }
  std::vector<Cuboid> out;
  for (int i : seen) {
    if (i < static_cast<int>(frame.scene.cuboids.size())) out.push_back(frame.scene.cuboids[i]);
  }
  return out;
}

bool EvalReport::centroid_ge_iou() const {
  for (int c = 0; c < kNumClasses; ++c) {
    if (ap_iou.classes[c].present && ap_centroid.classes[c].ap < ap_iou.classes[c].ap) return false;
  }
  return true;
}

namespace {

nlohmann::json ap_json(const APResult& r, double threshold) {
  nlohmann::json classes = nlohmann::json::object();
  for (int c = 0; c < kNumClasses; ++c) {
    const auto& a = r.classes[c];
    nlohmann::json entry = {{"present", a.present}, {"num_gt", a.num_gt}, {"num_detections", a.num_detections}};
    entry["ap"] = a.present ? nlohmann::json(a.ap) : nlohmann::json(nullptr);
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& p : a.curve.points) curve.push_back({p.recall, p.precision, p.score});
    entry["pr_curve"] = curve;
    classes[std::string(class_name(static_cast<ObjectClass>(c)))] = entry;
  }
  const double m = r.mean();
  return {{"threshold", threshold}, {"classes", classes}, {"mean", std::isnan(m) ? nlohmann::json(nullptr) : nlohmann::json(m)}};
}

APResult ap_from_json(const nlohmann::json& j) {
  APResult r;
  for (int c = 0; c < kNumClasses; ++c) {
    const auto name = std::string(class_name(static_cast<ObjectClass>(c)));
    if (!j.at("classes").contains(name)) continue;
    const auto& e = j.at("classes").at(name);
    auto& a = r.classes[c];
    a.present = e.at("present").get<bool>();
    a.ap = a.present ? json_number(e.at("ap")) : 0.0;
    a.num_gt = e.value("num_gt", 0);
    a.num_detections = e.value("num_detections", 0);
    for (const auto& p : e.value("pr_curve", nlohmann::json::array())) {
      a.curve.points.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
    }
  }
  return r;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json curve = nlohmann::json::array();
  for (double r = 0.5; r <= 5.0 + 1e-9; r += 0.5) curve.push_back({r, refpoints.recall(r)});
  return {{"model", model},
          {"config", prior3d::to_json(config)},
          {"nms", config.nms ? "bev-nms@" + std::to_string(config.nms_iou).substr(0, 4) : "off"},
          {"frames", frames},
          {"fallback_frames", fallback_frames},
          {"queries", queries},
          {"invisible_queries", invisible_queries},
          {"ap_iou", ap_json(ap_iou, config.iou_threshold)},
          {"ap_centroid", ap_json(ap_centroid, config.centroid_threshold)},
          {"refpoint_recall",
           {{"radius", config.refpoint_radius},
            {"recall", refpoint_recall},
            {"num_gt", refpoints.distances.size()},
            {"empty_queries", refpoints.empty_queries},
            {"curve", curve}}},
          {"smearing_index",
           {{"tau", config.smear_score},
            {"width", config.smear_width},
            {"mean", smearing_mean},
            {"num_gt", smearing.counts.size()}}},
          {"centroid_ge_iou", centroid_ge_iou()},
          {"meta", meta}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.model = j.value("model", std::string());
    r.config = eval_config_from_json(j.at("config"));
    r.frames = j.value("frames", 0);
    r.fallback_frames = j.value("fallback_frames", 0);
    r.queries = j.value("queries", 0LL);
    r.invisible_queries = j.value("invisible_queries", 0LL);
    r.ap_iou = ap_from_json(j.at("ap_iou"));
    r.ap_centroid = ap_from_json(j.at("ap_centroid"));
    r.meta = j.value("meta", nlohmann::json::object());
    r.smearing_mean = j.at("smearing_index").at("mean").get<double>();
    r.refpoint_recall = j.at("refpoint_recall").at("recall").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed report: ") + e.what());
  }
  return r;
}

void write_pr_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "model,class,criterion,recall,precision,score\n";
  out << std::setprecision(9);
  // Variant names such as "feat,loc" contain commas.
  const std::string model = "\"" + (report.model.empty() ? std::string("model") : report.model) + "\"";
  for (const auto& [criterion, ap] : {std::pair<const char*, const APResult*>{"iou", &report.ap_iou},
                                      std::pair<const char*, const APResult*>{"centroid", &report.ap_centroid}}) {
    for (int c = 0; c < kNumClasses; ++c) {
      for (const auto& p : ap->classes[c].curve.points) {
        out << model << ',' << class_name(static_cast<ObjectClass>(c)) << ',' << criterion << ',' << p.recall << ','
            << p.precision << ',' << p.score << '\n';
      }
    }
  }
}

template <typename T>
std::vector<Detection> predict(const Detector<T>& model, const Frame& frame, const EvalConfig& config,
                               std::vector<Eigen::Vector3d>* references, bool* fell_back, int* invisible) {
  NoGradGuard guard;
  const auto result = model.forward(frame);
  auto dets = decode_detections(result.blocks.back());
  if (references) {
    references->clear();
    const auto& ref = result.queries.reference;
    for (int i = 0; i < ref.dim(0); ++i) references->emplace_back(ref.at(i, 0), ref.at(i, 1), ref.at(i, 2));
  }
  if (fell_back) *fell_back = result.queries.fell_back;
  if (invisible) *invisible = result.invisible_queries;
  if (config.nms) dets = bev_nms(std::move(dets), config.nms_iou);
  return dets;
}

template <typename T>
EvalReport evaluate_run(const Detector<T>& model, const std::vector<Frame>& frames, const EvalConfig& config) {
  config.validate();
  const std::size_t n = frames.size();
  std::vector<FrameEval> evals(n);
  std::vector<std::vector<Eigen::Vector3d>> refs(n);
  std::vector<std::vector<Cuboid>> gts(n);
  std::vector<std::vector<Camera>> cams(n);
  std::vector<char> fell(n, 0);
  std::vector<int> invisible(n, 0), queries(n, 0);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      bool fb = false;
      evals[i].detections = predict(model, frames[i], config, &refs[i], &fb, &invisible[i]);
      evals[i].gts = visible_gts(frames[i]);
      gts[i] = evals[i].gts;
      cams[i] = frames[i].scene.cameras;
      fell[i] = fb;
      queries[i] = static_cast<int>(refs[i].size());
    }
  };
  const int jobs = std::max(1, std::min<int>(config.jobs, static_cast<int>(n)));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  EvalReport report;
  report.config = config;
  report.frames = static_cast<int>(n);
  report.ap_iou = average_precision(evals, MatchCriterion::kIoU, config.iou_threshold, config.max_range);
  report.ap_centroid = average_precision(evals, MatchCriterion::kCentroid, config.centroid_threshold, config.max_range);
  report.refpoints = refpoint_recall(refs, gts, config.max_range);
  report.smearing = smearing_index(evals, cams, config.smear_score, config.smear_width, config.max_range);
  report.smearing_mean = report.smearing.mean();
  report.refpoint_recall = report.refpoints.recall(config.refpoint_radius);
  for (std::size_t i = 0; i < n; ++i) {
    report.fallback_frames += fell[i];
    report.queries += queries[i];
    report.invisible_queries += invisible[i];
  }
  report.meta = {{"priors", prior_flags_name(model.config().priors)}, {"model", to_json(model.config())}};
  return report;
}

template std::vector<Detection> predict<float>(const Detector<float>&, const Frame&, const EvalConfig&,
                                               std::vector<Eigen::Vector3d>*, bool*, int*);
template std::vector<Detection> predict<double>(const Detector<double>&, const Frame&, const EvalConfig&,
                                                std::vector<Eigen::Vector3d>*, bool*, int*);
template EvalReport evaluate_run<float>(const Detector<float>&, const std::vector<Frame>&, const EvalConfig&);
template EvalReport evaluate_run<double>(const Detector<double>&, const std::vector<Frame>&, const EvalConfig&);

}  // namespace prior3d
