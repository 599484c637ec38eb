// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "mambamoe/ops.hpp"

namespace mambamoe {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive and finite");
  if (epochs < 1) fail("epochs must be >= 1");
  if (samples_per_class < 1) fail("samples_per_class must be >= 1");
  if (topk_infer < 1 || topk_infer > kNumSpatialExperts) fail("topk must lie in [1, 4]");
  if (channels < 2 || channels % 2 != 0) fail("C must be a positive even number");
  if (state_dim < 1) fail("D must be >= 1");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (repeats < 1) fail("repeats must be >= 1");
}

NetworkConfig TrainConfig::network(std::size_t bands, std::size_t classes) const {
  NetworkConfig c;
  c.bands = bands;
  c.classes = classes;
  c.channels = channels;
  c.state_dim = state_dim;
  c.mlp_ratio = mlp_ratio;
  c.momeb_on = momeb_on;
  c.sre_on = sre_on;
  c.sse_on = sse_on;
  return c;
}

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
AdamState<T> make_adam(const std::vector<Parameter<T>*>& params) {
  AdamState<T> s;
  for (const auto* p : params) {
    s.m.emplace_back(p->value.shape());
    s.v.emplace_back(p->value.shape());
  }
  return s;
}

template <typename T>
void adam_step(AdamState<T>& s, const std::vector<Parameter<T>*>& params, double lr) {
  if (s.m.size() != params.size() || s.v.size() != params.size()) {
    throw ShapeError("adam: state holds " + std::to_string(s.m.size()) + " buffers for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& ps = params[i]->value.shape();
    if (params[i]->grad.shape() != ps || s.m[i].shape() != ps || s.v[i].shape() != ps) {
      throw ShapeError("adam: buffer shape mismatch for " + params[i]->name);
    }
  }
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = s.m[i].vec();
    auto& v = s.v[i].vec();
    auto& w = p.value.vec();
    const auto& g = p.grad.vec();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
      const double vj = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      w[j] = static_cast<T>(w[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + s.eps));
    }
    p.mark_updated();
  }
}

template AdamState<float> make_adam(const std::vector<Parameter<float>*>&);
template AdamState<double> make_adam(const std::vector<Parameter<double>*>&);
template void adam_step(AdamState<float>&, const std::vector<Parameter<float>*>&, double);
template void adam_step(AdamState<double>&, const std::vector<Parameter<double>*>&, double);

Split split_per_class(const LabelRaster& labels, std::size_t n, std::uint64_t seed) {
  std::size_t k = 0;
  for (auto l : labels.labels) k = std::max<std::size_t>(k, l);
  std::vector<std::vector<std::size_t>> members(k + 1);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    if (labels.labels[p] != 0) members[labels.labels[p]].push_back(p);
  }
  Split s{PixelMask(labels.size(), 0), PixelMask(labels.size(), 0)};
  std::mt19937_64 rng(seed);
  for (std::size_t c = 1; c <= k; ++c) {
    auto& idx = members[c];
    if (idx.empty()) continue;  // id unused in this raster
    if (idx.size() <= n) {
      throw SplitError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                       " labeled pixels, need more than " + std::to_string(n));
    }
    // Partial Fisher-Yates: the first n entries become a uniform sample.
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n ? s.train : s.test)[idx[i]] = 1;
  }
  return s;
}

LabelRaster restrict_labels(const LabelRaster& labels, const PixelMask& mask) {
  if (mask.size() != labels.size()) throw ShapeError("mask size does not match label raster");
  LabelRaster out(labels.height, labels.width);
  for (std::size_t p = 0; p < labels.size(); ++p) out.labels[p] = mask[p] ? labels.labels[p] : 0;
  return out;
}

TrainingAborted::TrainingAborted(std::size_t e, const std::string& what, std::vector<double> terms)
    : NumericalError(what), epoch(e), last_terms(std::move(terms)) {}

namespace {

template <typename T>
LabelRaster argmax_labels(const Tensor<T>& logits) {
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2), n = h * w;
  LabelRaster out(h, w);
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (logits[c * n + p] > logits[best * n + p]) best = c;
    }
    out.labels[p] = static_cast<std::uint16_t>(best + 1);
  }
  return out;
}

std::string describe_terms(const std::vector<double>& terms) {
  std::ostringstream os;
  os << std::setprecision(6);
  for (std::size_t i = 0; i < terms.size(); ++i) os << (i ? "," : "") << terms[i];
  return os.str();
}

}  // namespace

TrainResult train(const TrainConfig& config, const HsiScene& scene) {
  config.validate();
  return train(config, scene, split_per_class(scene.labels, config.samples_per_class,
                                              derive_seed(config.seed, SeedStream::Split)));
}

TrainResult train(const TrainConfig& config, const HsiScene& scene, const Split& split) {
  config.validate();
  validate_scene(scene);
  const Tensor<float> x = normalize_scene(scene);
  const LabelRaster y_train = restrict_labels(scene.labels, split.train);

  TrainResult result{init_network<float>(config.network(scene.bands, scene.num_classes()),
                                         derive_seed(config.seed, SeedStream::Init)),
                     {},
                     split};
  auto params = parameters(result.net);
  AdamState<float> adam = make_adam(params);
  SeededRng mask_rng(derive_seed(config.seed, SeedStream::Mask));

  std::vector<double> last_terms;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    try {
      Tape<float> tape;
      Graph<float> g(tape, true, config.execution);
      std::optional<TrainSupervision> sup;
      if (config.uarb_on) sup = TrainSupervision{&y_train, &mask_rng, nullptr};
      ForwardOutput<float> out = forward_full(g, result.net, x, ForwardMode::train(), sup);
      LossTerms<float> terms = total_loss(out.stages, y_train, out.logits);
      rec.loss = static_cast<double>(terms.total.value()[0]);
      rec.final_term = terms.final_term;
      rec.stage_terms = terms.stage_terms;
      if (config.track_train_oa) {
        const LabelRaster pred = argmax_labels(out.logits.value());
        std::size_t hit = 0, total = 0;
        for (std::size_t p = 0; p < pred.size(); ++p) {
          if (!split.train[p]) continue;
          ++total;
          hit += pred.labels[p] == scene.labels.labels[p];
        }
        rec.train_oa = total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
      } else {
        rec.train_oa = std::numeric_limits<double>::quiet_NaN();
      }
      for (auto* p : params) p->zero_grad();
      tape.backward(terms.total);
      for (auto* p : params) {
        if (!p->grad.all_finite()) throw NumericalError("non-finite gradient in " + p->name);
      }
    } catch (const NumericalError& e) {
      throw TrainingAborted(epoch, "epoch " + std::to_string(epoch) + ": " + e.what() +
                                       " (previous terms: " + describe_terms(last_terms) + ")",
                            last_terms);
    }
    adam_step(adam, params, config.lr);
    last_terms = rec.stage_terms;
    last_terms.push_back(rec.final_term);
    result.history.push_back(std::move(rec));
  }
  return result;
}

Metrics metrics_from_confusion(std::vector<std::size_t> confusion, std::size_t k) {
  if (k == 0 || confusion.size() != k * k) throw ShapeError("confusion matrix must be K x K");
  Metrics m;
  m.classes = k;
  m.confusion = std::move(confusion);
  std::vector<double> row(k, 0.0), col(k, 0.0);
  double total = 0.0, trace = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double c = static_cast<double>(m.count(i, j));
      row[i] += c;
      col[j] += c;
      total += c;
    }
    trace += static_cast<double>(m.count(i, i));
  }
  if (total == 0.0) throw std::invalid_argument("metrics: empty confusion matrix");
  m.oa = trace / total;
  m.per_class_acc.assign(k, 0.0);
  std::size_t present = 0;
  double recall_sum = 0.0;
  double pe = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (row[i] > 0) {
      m.per_class_acc[i] = static_cast<double>(m.count(i, i)) / row[i];
      recall_sum += m.per_class_acc[i];
      ++present;
    }
    pe += (row[i] / total) * (col[i] / total);
  }
  m.aa = recall_sum / static_cast<double>(present);
  // pe == 1 only when truth and prediction are the same single class.
  m.kappa = pe == 1.0 ? (m.oa == 1.0 ? 1.0 : 0.0) : (m.oa - pe) / (1.0 - pe);
  return m;
}

LabelRaster predict(NetworkParams<float>& net, const Tensor<float>& x, std::size_t topk, Execution execution) {
  Tape<float> tape;
  Graph<float> g(tape, false, execution);
  ForwardOutput<float> out = forward_full(g, net, x, ForwardMode::infer(topk));
  return argmax_labels(out.logits.value());
}

Metrics score(const LabelRaster& pred, const LabelRaster& truth, const PixelMask& mask, std::size_t k) {
  if (pred.size() != truth.size() || mask.size() != truth.size()) throw ShapeError("score: raster sizes differ");
  std::vector<std::size_t> conf(k * k, 0);
  std::size_t n = 0;
  for (std::size_t p = 0; p < truth.size(); ++p) {
    if (!mask[p] || truth.labels[p] == 0) continue;
    if (truth.labels[p] > k || pred.labels[p] == 0 || pred.labels[p] > k) throw std::out_of_range("score: label outside 1..K");
    ++conf[(truth.labels[p] - 1) * k + (pred.labels[p] - 1)];
    ++n;
  }
  if (n == 0) throw std::invalid_argument("evaluate: empty test mask");
  return metrics_from_confusion(std::move(conf), k);
}

Metrics evaluate(NetworkParams<float>& net, const HsiScene& scene, const PixelMask& test_mask, std::size_t topk,
                 Execution execution) {
  if (std::none_of(test_mask.begin(), test_mask.end(), [](std::uint8_t v) { return v != 0; })) {
    throw std::invalid_argument("evaluate: empty test mask");
  }
  const LabelRaster pred = predict(net, normalize_scene(scene), topk, execution);
  return score(pred, scene.labels, test_mask, scene.num_classes());
}

MeanStd mean_std(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("mean_std: no values");
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  std::vector<double> dev;
  for (double v : values) dev.push_back((v - mean) * (v - mean));
  std::sort(dev.begin(), dev.end());
  double ss = 0.0;
  for (double d : dev) ss += d;
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

RepeatSummary summarize(const std::vector<Metrics>& runs, std::vector<std::uint64_t> seeds) {
  if (runs.empty()) throw std::invalid_argument("summarize: no runs");
  RepeatSummary s;
  s.seeds = std::move(seeds);
  s.runs = runs;
  auto collect = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(get(r));
    return mean_std(std::move(v));
  };
  s.oa = collect([](const Metrics& m) { return m.oa; });
  s.aa = collect([](const Metrics& m) { return m.aa; });
  s.kappa = collect([](const Metrics& m) { return m.kappa; });
  for (std::size_t c = 0; c < runs.front().classes; ++c) {
    s.per_class.push_back(collect([c](const Metrics& m) { return m.per_class_acc.at(c); }));
  }
  return s;
}

RepeatSummary run_repeats(const TrainConfig& config, const HsiScene& scene) {
  config.validate();
  auto one = [&](std::size_t i) {
    TrainConfig c = config;
    c.seed = config.seed + i;
    TrainResult r = train(c, scene);
    return evaluate(r.net, scene, r.split.test, c.topk_infer, c.execution);
  };
  std::vector<Metrics> runs;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < config.repeats; ++i) seeds.push_back(config.seed + i);
  if (config.execution == Execution::Parallel) {
    std::vector<std::future<Metrics>> pending;
    for (std::size_t i = 0; i < config.repeats; ++i) pending.push_back(std::async(std::launch::async, one, i));
    for (auto& f : pending) runs.push_back(f.get());
  } else {
    for (std::size_t i = 0; i < config.repeats; ++i) runs.push_back(one(i));
  }
  return summarize(runs, std::move(seeds));
}

void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
  os << "epoch,loss,train_oa\n";
  os << std::setprecision(9);
  for (const auto& r : history) {
    os << r.epoch << ',' << r.loss << ',';
    if (!std::isnan(r.train_oa)) os << r.train_oa;
    os << '\n';
  }
}

namespace {

std::string pct(const MeanStd& v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v.mean << "±" << 100.0 * v.std;
  return os.str();
}

}  // namespace

void write_metrics_report(std::ostream& os, const RepeatSummary& s, const std::vector<std::string>& class_names,
                          const std::string& column) {
  std::vector<std::pair<std::string, std::string>> rows;
  for (std::size_t c = 0; c < s.per_class.size(); ++c) {
    const std::string name = c < class_names.size() ? class_names[c] : "";
    rows.emplace_back(std::to_string(c + 1) + " " + name, pct(s.per_class[c]));
  }
  rows.emplace_back("OA (%)", pct(s.oa));
  rows.emplace_back("kappa (%)", pct(s.kappa));
  rows.emplace_back("AA (%)", pct(s.aa));
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.first.size());
  os << std::left << std::setw(static_cast<int>(width) + 2) << "Class" << column << '\n';
  for (const auto& [label, value] : rows) os << std::left << std::setw(static_cast<int>(width) + 2) << label << value << '\n';
  os << "runs " << s.runs.size();
  if (!s.seeds.empty()) {
    os << " seeds";
    for (auto seed : s.seeds) os << ' ' << seed;
  }
  os << '\n';
}

std::vector<TopKRow> topk_sweep(NetworkParams<float>& net, const HsiScene& scene, const PixelMask& test_mask,
                                const std::vector<std::size_t>& ks, Execution execution) {
  const Tensor<float> x = normalize_scene(scene);
  std::vector<TopKRow> rows;
  for (std::size_t k : ks) {
    rows.push_back({k, score(predict(net, x, k, execution), scene.labels, test_mask, scene.num_classes())});
  }
  return rows;
}

void write_topk_table(std::ostream& os, const std::vector<TopKRow>& rows) {
  os << std::left << std::setw(6) << "k" << std::setw(10) << "OA (%)" << std::setw(10) << "AA (%)" << "kappa (%)\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    os << std::left << std::setw(6) << ("k=" + std::to_string(r.k)) << std::setw(10) << 100.0 * r.metrics.oa
       << std::setw(10) << 100.0 * r.metrics.aa << 100.0 * r.metrics.kappa << '\n';
  }
  os.unsetf(std::ios::fixed);
}

}  // namespace mambamoe
