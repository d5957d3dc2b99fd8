#include "acia/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "acia/rng.hpp"

namespace acia::eval {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ScoredDet {
  double score;
  int image;
  int index;
  const Box* box;
};

}  // namespace

double average_precision(std::span<const ImageResult> images, int class_id, double iou_thresh) {
  std::vector<ScoredDet> dets;
  std::vector<std::vector<const Box*>> gts(images.size());
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const Box& g : images[i].ground_truth) {
      if (g.class_id == class_id) gts[i].push_back(&g);
    }
    n_gt += gts[i].size();
    const BoxSet& d = images[i].detections;
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (d[j].class_id != class_id) continue;
      if (!d[j].score) throw std::invalid_argument("average_precision: detection without score");
      dets.push_back({*d[j].score, static_cast<int>(i), static_cast<int>(j), &d[j]});
    }
  }
  if (n_gt == 0) return kNaN;
  std::stable_sort(dets.begin(), dets.end(), [](const ScoredDet& a, const ScoredDet& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> used(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) used[i].assign(gts[i].size(), false);

  // cumulative (tp, n) at the end of each tie group
  std::vector<std::pair<int, int>> points;
  int tp = 0;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    const ScoredDet& d = dets[k];
    auto& g = gts[static_cast<std::size_t>(d.image)];
    auto& u = used[static_cast<std::size_t>(d.image)];
    int best = -1;
    double best_iou = iou_thresh;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (u[j]) continue;
      const double v = iou(*d.box, *g[j]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(j);
        best_iou = v;
      }
    }
    if (best >= 0) {
      u[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    if (k + 1 == dets.size() || dets[k + 1].score != d.score) points.emplace_back(tp, static_cast<int>(k + 1));
  }

  // precision envelope from the right, then one term per recall level
  std::vector<double> env(points.size());
  double run = 0;
  for (std::size_t i = points.size(); i-- > 0;) {
    run = std::max(run, static_cast<double>(points[i].first) / points[i].second);
    env[i] = run;
  }
  double acc = 0;
  int prev_tp = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int j = prev_tp; j < points[i].first; ++j) acc += env[i];
    prev_tp = points[i].first;
  }
  return acc / static_cast<double>(n_gt);
}

double average_precision(const BoxSet& dets, const BoxSet& gts, double iou_thresh) {
  ImageResult r;
  r.detections = dets;
  r.ground_truth = gts;
  const int cls = !gts.empty() ? gts.front().class_id : (!dets.empty() ? dets.front().class_id : 0);
  for (Box& b : r.detections) b.class_id = cls;
  for (Box& b : r.ground_truth) b.class_id = cls;
  return average_precision(std::span<const ImageResult>(&r, 1), cls, iou_thresh);
}

double mean_ap(std::span<const double> per_class, const std::vector<bool>& valid) {
  if (valid.size() != per_class.size()) throw std::invalid_argument("mean_ap: mask size mismatch");
  double s = 0;
  int n = 0;
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    if (!valid[k]) continue;
    s += per_class[k];
    ++n;
  }
  if (n == 0) throw std::invalid_argument("mean_ap: no valid class");
  return s / n;
}

EvalResult evaluate(std::span<const ImageResult> images, int num_classes, double iou_thresh) {
  EvalResult r;
  r.n_images = static_cast<int>(images.size());
  r.per_class_ap.resize(static_cast<std::size_t>(num_classes));
  r.valid.resize(static_cast<std::size_t>(num_classes));
  r.separability.assign(static_cast<std::size_t>(num_classes), kNaN);
  for (int k = 0; k < num_classes; ++k) {
    const double ap = average_precision(images, k, iou_thresh);
    r.per_class_ap[static_cast<std::size_t>(k)] = ap;
    r.valid[static_cast<std::size_t>(k)] = !std::isnan(ap);
  }
  r.map50 = mean_ap(r.per_class_ap, r.valid);
  return r;
}

double domain_separability(std::span<const InstanceRecord> records, const ProbeConfig& cfg) {
  if (records.empty()) throw std::invalid_argument("domain_separability: no records");
  std::map<int, int> dom_index;
  for (const InstanceRecord& r : records) dom_index.emplace(r.domain_id, 0);
  if (dom_index.size() < 2) throw std::invalid_argument("domain_separability: need at least two domains");
  int next = 0;
  for (auto& [d, idx] : dom_index) idx = next++;
  const int n_dom = next;
  const int n = static_cast<int>(records.size());
  const int f = static_cast<int>(records.front().feature.size());
  if (cfg.folds < 2) throw std::invalid_argument("domain_separability: need at least two folds");

  Eigen::MatrixXd x(n, f);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    if (static_cast<int>(r.feature.size()) != f) throw std::invalid_argument("domain_separability: ragged features");
    for (int j = 0; j < f; ++j) x(i, j) = r.feature[static_cast<std::size_t>(j)];
    y[static_cast<std::size_t>(i)] = dom_index.at(r.domain_id);
  }

  // stratified fold assignment
  std::vector<int> fold(static_cast<std::size_t>(n));
  Rng rng(cfg.seed);
  for (int d = 0; d < n_dom; ++d) {
    std::vector<int> idx;
    for (int i = 0; i < n; ++i) {
      if (y[static_cast<std::size_t>(i)] == d) idx.push_back(i);
    }
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    for (std::size_t i = 0; i < idx.size(); ++i) fold[static_cast<std::size_t>(idx[i])] = static_cast<int>(i % static_cast<std::size_t>(cfg.folds));
  }

  std::vector<int> pred(static_cast<std::size_t>(n), -1);
  for (int k = 0; k < cfg.folds; ++k) {
    std::vector<int> tr, te;
    for (int i = 0; i < n; ++i) (fold[static_cast<std::size_t>(i)] == k ? te : tr).push_back(i);
    if (te.empty() || tr.empty()) continue;
    const int m = static_cast<int>(tr.size());

    // standardize with training statistics; a trailing 1 carries the bias
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(f), sd = Eigen::VectorXd::Zero(f);
    for (int i : tr) mu += x.row(i).transpose();
    mu /= m;
    for (int i : tr) sd += (x.row(i).transpose() - mu).cwiseAbs2();
    for (int j = 0; j < f; ++j) sd(j) = std::sqrt(sd(j) / m) + 1e-8;
    auto design = [&](const std::vector<int>& rows) {
      Eigen::MatrixXd a(static_cast<int>(rows.size()), f + 1);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (int j = 0; j < f; ++j) a(static_cast<int>(r), j) = (x(rows[r], j) - mu(j)) / sd(j);
        a(static_cast<int>(r), f) = 1.0;
      }
      return a;
    };
    const Eigen::MatrixXd a = design(tr);
    const Eigen::MatrixXd at = design(te);

    // class-balanced sample weights
    std::vector<int> count(static_cast<std::size_t>(n_dom), 0);
    for (int i : tr) ++count[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])];
    int present = 0;
    for (int c : count) present += c > 0;
    Eigen::VectorXd wt(m);
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(m, n_dom);
    for (int r = 0; r < m; ++r) {
      const int d = y[static_cast<std::size_t>(tr[static_cast<std::size_t>(r)])];
      wt(r) = 1.0 / (present * count[static_cast<std::size_t>(d)]);
      onehot(r, d) = 1.0;
    }

    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(f + 1, n_dom);
    for (int it = 0; it < cfg.iterations; ++it) {
      Eigen::MatrixXd z = a * w;
      for (int r = 0; r < m; ++r) {
        double mx = z(r, 0);
        for (int d = 1; d < n_dom; ++d) mx = std::max(mx, z(r, d));
        double s = 0;
        for (int d = 0; d < n_dom; ++d) s += (z(r, d) = std::exp(z(r, d) - mx));
        for (int d = 0; d < n_dom; ++d) z(r, d) = (z(r, d) / s - onehot(r, d)) * wt(r);
      }
      Eigen::MatrixXd g = a.transpose() * z;
      g.topRows(f) += cfg.l2 * w.topRows(f);
      w -= cfg.learning_rate * g;
    }
    const Eigen::MatrixXd zt = at * w;
    for (std::size_t r = 0; r < te.size(); ++r) {
      int best = 0;
      for (int d = 1; d < n_dom; ++d) {
        if (zt(static_cast<int>(r), d) > zt(static_cast<int>(r), best)) best = d;
      }
      pred[static_cast<std::size_t>(te[r])] = best;
    }
  }

  double bacc = 0;
  for (int d = 0; d < n_dom; ++d) {
    int tot = 0, hit = 0;
    for (int i = 0; i < n; ++i) {
      if (y[static_cast<std::size_t>(i)] != d || pred[static_cast<std::size_t>(i)] < 0) continue;
      ++tot;
      hit += pred[static_cast<std::size_t>(i)] == d;
    }
    bacc += tot > 0 ? static_cast<double>(hit) / tot : 0.0;
  }
  bacc /= n_dom;
  const double chance = 1.0 / n_dom;
  return std::max(0.0, (bacc - chance) / (1.0 - chance));
}

std::vector<double> class_conditional_separability(std::span<const InstanceRecord> records, int num_classes,
                                                   const ProbeConfig& cfg, int min_per_domain) {
  std::vector<double> out(static_cast<std::size_t>(num_classes), kNaN);
  for (int k = 0; k < num_classes; ++k) {
    std::vector<InstanceRecord> sub;
    std::map<int, int> per_domain;
    for (const InstanceRecord& r : records) {
      if (r.class_id != k) continue;
      sub.push_back(r);
      ++per_domain[r.domain_id];
    }
    if (per_domain.size() < 2) continue;
    bool enough = true;
    for (const auto& [d, c] : per_domain) enough = enough && c >= min_per_domain;
    if (!enough) continue;
    ProbeConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, static_cast<std::uint64_t>(k));
    out[static_cast<std::size_t>(k)] = domain_separability(sub, c);
  }
  return out;
}

double finite_mean(std::span<const double> v) {
  double s = 0;
  int n = 0;
  for (double x : v) {
    if (!std::isfinite(x)) continue;
    s += x;
    ++n;
  }
  return n > 0 ? s / n : kNaN;
}

void write_eval_csv(const std::filesystem::path& path, const EvalResult& r, const std::vector<std::string>& class_names) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "class,ap50,separability\n";
  auto cell = [](double v) {
    if (!std::isfinite(v)) return std::string();
    std::ostringstream o;
    o.precision(10);
    o << v;
    return o.str();
  };
  for (std::size_t k = 0; k < r.per_class_ap.size(); ++k) {
    const std::string name = k < class_names.size() ? class_names[k] : std::to_string(k);
    out << name << ',' << cell(r.per_class_ap[k]) << ',' << cell(k < r.separability.size() ? r.separability[k] : kNaN) << '\n';
  }
  out << "# map50=" << r.map50 << " mean_separability=" << finite_mean(r.separability) << " n_images=" << r.n_images << '\n';
}

}  // namespace acia::eval
