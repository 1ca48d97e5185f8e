#ifndef LTX_TRAINING_HPP
#define LTX_TRAINING_HPP

#include "ltx/config.hpp"
#include "ltx/dataio.hpp"
#include "ltx/decoder.hpp"
#include "ltx/nnet.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ltx {

enum class LossMode { kFullSum, kFrameCe };
enum class OptimizerKind { kSgd, kAdam };

std::string_view loss_mode_name(LossMode mode);
LossMode parse_loss_mode(std::string_view tag);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int warmup_steps = 0;   // linear warmup; 0 disables
  double clip_norm = 0.0;  // global gradient-norm clipping; 0 disables
  double lr_decay = 1.0;   // learning-rate factor applied after every epoch
};

struct MaskingConfig {
  bool enabled = false;
  int time_spans = 2;
  int max_time_width = 10;
  int feature_spans = 1;
  int max_feature_width = 2;
};

struct TrainConfig {
  LossMode loss_mode = LossMode::kFullSum;
  bool chunking = false;
  int chunk_size = 64;
  int chunk_step = 32;
  double focal_gamma = 2.0;
  double label_smoothing = 0.1;
  double switchout_prob = 0.05;
  double aux_ctc_weight = 0.5;
  OptimizerConfig optimizer;
  MaskingConfig masking;
  int epochs = 10;
  int batch_size = 8;
  std::uint64_t seed = 1;
  int holdout_beam = 1;
  // Write measured seconds into the metrics log; when off the column is 0
  // so that logs of repeated runs compare byte for byte.
  bool record_wall_time = true;

  // "train." keys of a ConfigMap.
  static TrainConfig from_config(const ConfigMap& cfg);
  void validate() const;
};

// --- losses ---------------------------------------------------------------------

struct LossValue {
  double loss = 0.0;  // normalized batch loss including the auxiliary term
  double main = 0.0;  // normalized main criterion
  double aux = 0.0;   // weighted auxiliary CTC term
};

// Mean over sequences of the full-sum NLL. With accumulate set, parameter
// gradients of the returned loss are added to the model's grad buffers.
LossValue loss_full_sum(TransducerModel& model, std::span<const Example> batch,
                        const TrainConfig& config, bool accumulate);

// A CE training unit: features with the alignment to follow.
struct AlignedExample {
  const Eigen::MatrixXd* features = nullptr;
  LabelSequence labels;
  std::vector<Symbol> alignment;
  std::vector<Symbol> feedback;  // switched-out label feedback; empty = alignment
};

struct FrameCeTerms {
  double loss = 0.0;                 // summed over frames
  Eigen::MatrixXd grad;              // dL/dlog_probs, V x U
};

// Focal, label-smoothed cross entropy of the targets under log_probs (V x U),
// summed over columns.
FrameCeTerms frame_ce_terms(const Eigen::MatrixXd& log_probs, const std::vector<Symbol>& targets,
                            double focal_gamma, double label_smoothing);

// Mean over all frames of the frame-wise CE plus the auxiliary term.
LossValue loss_frame_ce(TransducerModel& model, std::span<const AlignedExample> batch,
                        const TrainConfig& config, bool accumulate);

// weight * CTC NLL of the auxiliary head on h. With dh set, dL/dh is added
// to it and parameter gradients are accumulated. Returns 0 for weight 0 or
// when y cannot be reached in h's frames.
double aux_ctc_loss(TransducerModel& model, const Eigen::MatrixXd& h, const LabelSequence& y,
                    double weight, Eigen::MatrixXd* dh);

// --- data preparation ------------------------------------------------------------------

struct FrameWindow {
  int begin = 0;
  int end = 0;
  bool operator==(const FrameWindow&) const = default;
};

// Windows [k*step, min(k*step+size, T)) for every k with k*step < T; a single
// window when size >= T.
std::vector<FrameWindow> chunk_windows(int frames, int size, int step);

struct Chunk {
  Eigen::MatrixXd features;
  std::vector<Symbol> alignment;
};

// Frame-synchronous topologies only. pool_factor maps alignment frames onto
// input rows.
std::vector<Chunk> chunk(Topology kind, const Eigen::MatrixXd& features,
                         const std::vector<Symbol>& alignment, int size, int step,
                         int pool_factor = 1);

// Replaces each non-blank symbol, with probability prob, by one of the other
// labels chosen uniformly.
std::vector<Symbol> switchout(const std::vector<Symbol>& feedback, double prob, const Vocab& vocab,
                              std::mt19937_64& rng);

// Zeroes random time and feature spans in place.
void mask_features(Eigen::MatrixXd& features, const MaskingConfig& config, std::mt19937_64& rng);

// --- optimization ---------------------------------------------------------------------

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}
  // Applies one update from the accumulated gradients.
  void step(const std::vector<Param*>& params);
  // Multiplies the learning rate by lr_decay.
  void end_epoch() { lr_scale_ *= config_.lr_decay; }
  long steps() const { return steps_; }

 private:
  OptimizerConfig config_;
  long steps_ = 0;
  double lr_scale_ = 1.0;
  std::vector<Eigen::MatrixXd> m_, v_;
};

// --- training loop ------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double holdout_error = 0.0;  // label error rate in percent
  double wall_seconds = 0.0;
};

void write_metrics(std::ostream& out, const std::vector<EpochMetrics>& log);

struct TrainHooks {
  // Called after every epoch with the updated model.
  std::function<void(const TransducerModel&, const EpochMetrics&)> on_epoch;
};

// Frame CE mode needs an alignment of the model's topology on every training
// example (ValidationError otherwise).
std::vector<EpochMetrics> train(TransducerModel& model, const Corpus& train_set,
                                const Corpus& holdout, const TrainConfig& config,
                                const TrainHooks& hooks = {});

// Label error rate (percent) of beam-search output against the references.
double label_error_rate(const TransducerModel& model, const Corpus& corpus, int beam_size);

// --- alignment -------------------------------------------------------------------------

// Mean over all frames of the occupancy posteriors of each symbol, as log
// probabilities. Sequences whose targets are unreachable are skipped.
Eigen::VectorXd estimate_prior(const TransducerModel& model, const Corpus& corpus);

struct AlignResult {
  std::vector<AlignmentRecord> records;
  std::vector<std::string> unreachable;
};

AlignResult align_corpus(const TransducerModel& model, const Corpus& corpus,
                         const std::optional<AlignmentPrior>& prior);

}  // namespace ltx

#endif  // LTX_TRAINING_HPP
