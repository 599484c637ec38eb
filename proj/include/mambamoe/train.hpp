// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambamoe/data_io.hpp"
#include "mambamoe/network.hpp"

namespace mambamoe {

struct TrainConfig {
  double lr = 5e-4;
  std::size_t epochs = 200;
  std::size_t samples_per_class = 15;
  std::uint64_t seed = 0;
  std::size_t topk_infer = 3;
  std::size_t channels = 16;
  std::size_t state_dim = 8;
  std::size_t mlp_ratio = 2;
  bool momeb_on = true;
  bool uarb_on = true;
  bool sre_on = true;
  bool sse_on = true;
  std::size_t repeats = 10;
  Execution execution = Execution::Serial;
  bool track_train_oa = true;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  NetworkConfig network(std::size_t bands, std::size_t classes) const;
};

/// Independent streams derived from one run seed.
enum class SeedStream : std::uint64_t { Init = 1, Split = 2, Mask = 3 };
std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream);

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// Moment buffers zeroed and shaped like params.
template <typename T>
AdamState<T> make_adam(const std::vector<Parameter<T>*>& params);

/// Bias-corrected Adam on each Parameter's accumulated grad, in place.
template <typename T>
void adam_step(AdamState<T>& state, const std::vector<Parameter<T>*>& params, double lr);

struct Split {
  PixelMask train;
  PixelMask test;
};

class SplitError : public DataError {
 public:
  using DataError::DataError;
};

/// Exactly n uniformly drawn training pixels per class; every other labeled
/// pixel goes to test.
Split split_per_class(const LabelRaster& labels, std::size_t n, std::uint64_t seed);

/// Labels on masked pixels, 0 elsewhere.
LabelRaster restrict_labels(const LabelRaster& labels, const PixelMask& mask);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double train_oa = 0.0;  // NaN when not tracked
  double final_term = 0.0;
  std::vector<double> stage_terms;
};

/// Non-finite loss or activation during training.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(std::size_t epoch, const std::string& what, std::vector<double> terms);
  std::size_t epoch;
  std::vector<double> last_terms;  // loss terms of the last finite epoch
};

struct TrainResult {
  NetworkParams<float> net;
  std::vector<EpochRecord> history;
  Split split;
};

TrainResult train(const TrainConfig& config, const HsiScene& scene);
TrainResult train(const TrainConfig& config, const HsiScene& scene, const Split& split);

struct Metrics {
  std::size_t classes = 0;
  std::vector<std::size_t> confusion;  // classes x classes, row = true class
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  std::vector<double> per_class_acc;

  std::size_t count(std::size_t truth, std::size_t predicted) const { return confusion[truth * classes + predicted]; }
};

/// OA = trace/total, AA = mean recall over classes present, kappa from
/// marginal products.
Metrics metrics_from_confusion(std::vector<std::size_t> confusion, std::size_t classes);

/// Argmax class (1-based) at every pixel under top-k inference.
LabelRaster predict(NetworkParams<float>& net, const Tensor<float>& x, std::size_t topk,
                    Execution execution = Execution::Serial);

Metrics evaluate(NetworkParams<float>& net, const HsiScene& scene, const PixelMask& test_mask, std::size_t topk,
                 Execution execution = Execution::Serial);
Metrics score(const LabelRaster& predictions, const LabelRaster& truth, const PixelMask& mask, std::size_t classes);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

/// Order-independent: values are summed in sorted order.
MeanStd mean_std(std::vector<double> values);

struct RepeatSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<Metrics> runs;
  MeanStd oa, aa, kappa;
  std::vector<MeanStd> per_class;
};

RepeatSummary summarize(const std::vector<Metrics>& runs, std::vector<std::uint64_t> seeds = {});

/// Repeat i trains with seed + i and evaluates on its own split at
/// config.topk_infer. Parallel execution runs repeats concurrently.
RepeatSummary run_repeats(const TrainConfig& config, const HsiScene& scene);

void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history);

/// Per-class rows, then OA, kappa, AA; values as percentages "mean±std".
void write_metrics_report(std::ostream& os, const RepeatSummary& summary, const std::vector<std::string>& class_names,
                          const std::string& column = "MambaMoE");

struct TopKRow {
  std::size_t k = 0;
  Metrics metrics;
};

/// One trained model evaluated at k = 1..4.
std::vector<TopKRow> topk_sweep(NetworkParams<float>& net, const HsiScene& scene, const PixelMask& test_mask,
                                const std::vector<std::size_t>& ks, Execution execution = Execution::Serial);
void write_topk_table(std::ostream& os, const std::vector<TopKRow>& rows);

}  // namespace mambamoe
