#include "ltx/training.hpp"

#include "ltx/error.hpp"
#include "ltx/logspace.hpp"
#include "ltx/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace ltx {

std::string_view loss_mode_name(LossMode mode) {
  return mode == LossMode::kFullSum ? "full_sum" : "frame_ce";
}

LossMode parse_loss_mode(std::string_view tag) {
  if (tag == "full_sum") return LossMode::kFullSum;
  if (tag == "frame_ce") return LossMode::kFrameCe;
  throw ConfigError("unknown train.loss_mode '" + std::string(tag) + "' (expected full_sum or frame_ce)");
}

TrainConfig TrainConfig::from_config(const ConfigMap& cfg) {
  TrainConfig c;
  c.loss_mode = parse_loss_mode(cfg.get_string("train.loss_mode", "full_sum"));
  c.chunking = cfg.get_bool("train.chunking", c.chunking);
  c.chunk_size = static_cast<int>(cfg.get_int("train.chunk_size", c.chunk_size));
  c.chunk_step = static_cast<int>(cfg.get_int("train.chunk_step", c.chunk_step));
  c.focal_gamma = cfg.get_double("train.focal_gamma", c.focal_gamma);
  c.label_smoothing = cfg.get_double("train.label_smoothing", c.label_smoothing);
  c.switchout_prob = cfg.get_double("train.switchout_prob", c.switchout_prob);
  c.aux_ctc_weight = cfg.get_double("train.aux_ctc_weight", c.aux_ctc_weight);

  const std::string opt = cfg.get_string("train.optimizer", "adam");
  if (opt == "adam")
    c.optimizer.kind = OptimizerKind::kAdam;
  else if (opt == "sgd")
    c.optimizer.kind = OptimizerKind::kSgd;
  else
    throw ConfigError("unknown train.optimizer '" + opt + "' (expected sgd or adam)");
  c.optimizer.learning_rate = cfg.get_double("train.learning_rate", c.optimizer.learning_rate);
  c.optimizer.beta1 = cfg.get_double("train.beta1", c.optimizer.beta1);
  c.optimizer.beta2 = cfg.get_double("train.beta2", c.optimizer.beta2);
  c.optimizer.epsilon = cfg.get_double("train.adam_epsilon", c.optimizer.epsilon);
  c.optimizer.warmup_steps = static_cast<int>(cfg.get_int("train.warmup_steps", c.optimizer.warmup_steps));
  c.optimizer.clip_norm = cfg.get_double("train.clip_norm", c.optimizer.clip_norm);
  c.optimizer.lr_decay = cfg.get_double("train.lr_decay", c.optimizer.lr_decay);

  c.masking.enabled = cfg.get_bool("train.masking", c.masking.enabled);
  c.masking.time_spans = static_cast<int>(cfg.get_int("train.mask_time_spans", c.masking.time_spans));
  c.masking.max_time_width = static_cast<int>(cfg.get_int("train.mask_max_time_width", c.masking.max_time_width));
  c.masking.feature_spans = static_cast<int>(cfg.get_int("train.mask_feature_spans", c.masking.feature_spans));
  c.masking.max_feature_width =
      static_cast<int>(cfg.get_int("train.mask_max_feature_width", c.masking.max_feature_width));

  c.epochs = static_cast<int>(cfg.get_int("train.epochs", c.epochs));
  c.batch_size = static_cast<int>(cfg.get_int("train.batch_size", c.batch_size));
  c.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", static_cast<long>(c.seed)));
  c.holdout_beam = static_cast<int>(cfg.get_int("train.holdout_beam", c.holdout_beam));
  c.record_wall_time = cfg.get_bool("train.record_wall_time", c.record_wall_time);
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (chunk_size < 1 || chunk_step < 1 || chunk_step > chunk_size)
    throw ConfigError("train.chunk_step must satisfy 1 <= chunk_step <= chunk_size");
  if (loss_mode == LossMode::kFullSum && chunking)
    throw ConfigError("train.chunking cannot be combined with train.loss_mode = full_sum");
  if (!(focal_gamma >= 0.0)) throw ConfigError("train.focal_gamma must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ConfigError("train.label_smoothing must be in [0, 1)");
  if (!(switchout_prob >= 0.0 && switchout_prob < 1.0))
    throw ConfigError("train.switchout_prob must be in [0, 1)");
  if (!(aux_ctc_weight >= 0.0)) throw ConfigError("train.aux_ctc_weight must be >= 0");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
    throw ConfigError("train.beta1 and train.beta2 must be in [0, 1)");
  if (optimizer.warmup_steps < 0 || optimizer.clip_norm < 0.0)
    throw ConfigError("train.warmup_steps and train.clip_norm must be >= 0");
  if (!(optimizer.lr_decay > 0.0 && optimizer.lr_decay <= 1.0)) throw ConfigError("train.lr_decay must be in (0, 1]");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (holdout_beam < 1) throw ConfigError("train.holdout_beam must be >= 1");
  if (masking.time_spans < 0 || masking.max_time_width < 0 || masking.feature_spans < 0 ||
      masking.max_feature_width < 0)
    throw ConfigError("masking widths and counts must be >= 0");
}

// --- losses ---------------------------------------------------------------------------

double aux_ctc_loss(TransducerModel& model, const Eigen::MatrixXd& h, const LabelSequence& y,
                    double weight, Eigen::MatrixXd* dh) {
  if (weight == 0.0) return 0.0;
  const int frames = static_cast<int>(h.cols());
  if (!is_reachable(Topology::kCtc, frames, y)) return 0.0;
  const Eigen::MatrixXd lp = model.aux_log_probs(h);
  const int big_n = static_cast<int>(y.size());
  EmissionLattice lattice(Topology::kCtc, frames, big_n, model.vocab_size());
  for (int t = 0; t < frames; ++t)
    for (int n = 0; n <= big_n; ++n) lattice.node(t, n) = lp.col(t).transpose();
  if (!dh) return weight * full_sum_nll(lattice, y).nll;

  const OccupancyGrid occ = occupancies(lattice, y);
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(lp.rows(), frames);
  for (int t = 0; t < frames; ++t)
    for (int n = 0; n <= big_n; ++n) g.col(t) -= weight * occ.gamma.row(lattice.row(t, n)).transpose();
  *dh += model.aux_backward(h, lp, g);
  return weight * occ.nll;
}

LossValue loss_full_sum(TransducerModel& model, std::span<const Example> batch,
                        const TrainConfig& config, bool accumulate) {
  if (batch.empty()) throw ValidationError("empty batch");
  const double scale = 1.0 / static_cast<double>(batch.size());
  LossValue value;
  for (const auto& ex : batch) {
    const EncoderOutput enc = model.encode(ex.features);
    const LatticeForward fwd = model.lattice_forward(enc, ex.labels);
    double nll;
    Eigen::MatrixXd dh;
    if (accumulate) {
      OccupancyGrid occ;
      try {
        occ = occupancies(fwd.lattice, ex.labels);
      } catch (const UnreachableError&) {
        throw ValidationError("sequence '" + ex.id + "': target cannot be reached in " +
                              std::to_string(enc.frames()) + " frames");
      }
      nll = occ.nll;
      dh = model.lattice_backward(fwd, -scale * occ.gamma);
    } else {
      nll = full_sum_nll(fwd.lattice, ex.labels).nll;
    }
    value.main += scale * nll;
    value.aux += aux_ctc_loss(model, enc.h, ex.labels, scale * config.aux_ctc_weight,
                              accumulate ? &dh : nullptr);
    if (accumulate) model.encode_backward(enc, dh);
  }
  value.loss = value.main + value.aux;
  return value;
}

FrameCeTerms frame_ce_terms(const Eigen::MatrixXd& log_probs, const std::vector<Symbol>& targets,
                            double focal_gamma, double label_smoothing) {
  const Eigen::Index v = log_probs.rows();
  const Eigen::Index steps = log_probs.cols();
  if (static_cast<Eigen::Index>(targets.size()) != steps)
    throw DimensionError("target count differs from the number of steps");
  FrameCeTerms out;
  out.grad.setZero(v, steps);
  const double off = label_smoothing / static_cast<double>(v);
  for (Eigen::Index u = 0; u < steps; ++u) {
    const Symbol a = targets[static_cast<std::size_t>(u)];
    const double lp_a = log_probs(a, u);
    const double p = std::exp(lp_a);
    // Cross entropy against the smoothed target distribution.
    double ce = (1.0 - label_smoothing) * lp_a;
    if (label_smoothing > 0.0) ce += off * log_probs.col(u).sum();
    const double focal = focal_gamma == 0.0 ? 1.0 : std::pow(1.0 - p, focal_gamma);
    out.loss -= focal * ce;
    out.grad.col(u).setConstant(-focal * off);
    out.grad(a, u) -= focal * (1.0 - label_smoothing);
    if (focal_gamma != 0.0 && p < 1.0)
      out.grad(a, u) += ce * focal_gamma * std::pow(1.0 - p, focal_gamma - 1.0) * p;
  }
  return out;
}

LossValue loss_frame_ce(TransducerModel& model, std::span<const AlignedExample> batch,
                        const TrainConfig& config, bool accumulate) {
  if (batch.empty()) throw ValidationError("empty batch");
  std::size_t total_steps = 0;
  for (const auto& ex : batch) total_steps += ex.alignment.size();
  if (total_steps == 0) throw ValidationError("batch has no alignment steps");
  const double scale = 1.0 / static_cast<double>(total_steps);
  const double aux_scale = config.aux_ctc_weight / static_cast<double>(batch.size());
  LossValue value;
  for (const auto& ex : batch) {
    if (ex.alignment.empty()) throw ValidationError("missing alignment");
    const EncoderOutput enc = model.encode(*ex.features);
    if (replay_frames(model.topology(), ex.alignment) != enc.frames())
      throw DimensionError("alignment covers " + std::to_string(replay_frames(model.topology(), ex.alignment)) +
                           " frames but the encoder produced " + std::to_string(enc.frames()));
    const AlignedForward fwd = model.aligned_forward(enc, ex.alignment, ex.feedback);
    const FrameCeTerms terms =
        frame_ce_terms(fwd.log_probs, ex.alignment, config.focal_gamma, config.label_smoothing);
    value.main += scale * terms.loss;
    Eigen::MatrixXd dh;
    if (accumulate) dh = model.aligned_backward(fwd, scale * terms.grad);
    value.aux += aux_ctc_loss(model, enc.h, ex.labels, aux_scale, accumulate ? &dh : nullptr);
    if (accumulate) model.encode_backward(enc, dh);
  }
  value.loss = value.main + value.aux;
  return value;
}

// --- data preparation ----------------------------------------------------------------------

std::vector<FrameWindow> chunk_windows(int frames, int size, int step) {
  if (size < 1 || step < 1 || step > size)
    throw ConfigError("chunking needs 1 <= step <= size");
  if (frames < 1) return {};
  if (size >= frames) return {{0, frames}};
  std::vector<FrameWindow> out;
  for (int begin = 0; begin < frames; begin += step) out.push_back({begin, std::min(begin + size, frames)});
  return out;
}

std::vector<Chunk> chunk(Topology kind, const Eigen::MatrixXd& features,
                         const std::vector<Symbol>& alignment, int size, int step, int pool_factor) {
  if (kind == Topology::kRnnt)
    throw ConfigError("chunking is only defined for frame-synchronous topologies (ctc, rna)");
  const int frames = static_cast<int>(alignment.size());
  const auto rows = static_cast<int>(features.rows());
  if ((rows + pool_factor - 1) / pool_factor != frames)
    throw DimensionError("alignment length does not match the feature frames");
  std::vector<Chunk> out;
  for (const auto& w : chunk_windows(frames, size, step)) {
    const int first = w.begin * pool_factor;
    const int last = std::min(w.end * pool_factor, rows);
    out.push_back({features.middleRows(first, last - first),
                   std::vector<Symbol>(alignment.begin() + w.begin, alignment.begin() + w.end)});
  }
  return out;
}

std::vector<Symbol> switchout(const std::vector<Symbol>& feedback, double prob, const Vocab& vocab,
                              std::mt19937_64& rng) {
  std::vector<Symbol> out = feedback;
  const int labels = vocab.num_labels();
  if (prob <= 0.0 || labels < 2) return out;
  std::bernoulli_distribution flip(prob);
  std::uniform_int_distribution<int> other(1, labels - 1);
  for (auto& s : out) {
    if (s == kBlank || !flip(rng)) continue;
    const int r = other(rng);
    s = r >= s ? r + 1 : r;
  }
  return out;
}

void mask_features(Eigen::MatrixXd& features, const MaskingConfig& config, std::mt19937_64& rng) {
  const auto frames = static_cast<int>(features.rows());
  const auto dim = static_cast<int>(features.cols());
  auto span = [&](int extent, int max_width) {
    const int width = std::min(std::uniform_int_distribution<int>(0, max_width)(rng), extent);
    const int start = std::uniform_int_distribution<int>(0, extent - width)(rng);
    return std::pair{start, width};
  };
  for (int i = 0; i < config.time_spans; ++i) {
    const auto [start, width] = span(frames, config.max_time_width);
    features.middleRows(start, width).setZero();
  }
  for (int i = 0; i < config.feature_spans; ++i) {
    const auto [start, width] = span(dim, config.max_feature_width);
    features.middleCols(start, width).setZero();
  }
}

// --- optimizer ------------------------------------------------------------------------------

void Optimizer::step(const std::vector<Param*>& params) {
  ++steps_;
  double lr = config_.learning_rate * lr_scale_;
  if (config_.warmup_steps > 0)
    lr *= std::min(1.0, static_cast<double>(steps_) / config_.warmup_steps);
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const Param* p : params) sq += p->grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  if (config_.kind == OptimizerKind::kSgd) {
    for (Param* p : params) p->value -= (lr * scale) * p->grad;
    return;
  }
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (const Param* p : params) {
      m_.push_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
    }
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Eigen::MatrixXd g = scale * params[i]->grad;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseAbs2();
    params[i]->value.array() -=
        lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.epsilon);
  }
}

// --- training loop ---------------------------------------------------------------------------

void write_metrics(std::ostream& out, const std::vector<EpochMetrics>& log) {
  for (const auto& m : log)
    out << m.epoch << '\t' << format_double(m.train_loss) << '\t' << format_double(m.holdout_error)
        << '\t' << format_double(m.wall_seconds) << '\n';
}

double label_error_rate(const TransducerModel& model, const Corpus& corpus, int beam_size) {
  std::vector<std::size_t> errors(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    BeamOptions opts;
    opts.beam_size = beam_size;
    errors[i] = edit_distance(beam_search(model, corpus[i].features, opts).labels, corpus[i].labels);
  });
  std::size_t total = 0, ref = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    total += errors[i];
    ref += corpus[i].labels.size();
  }
  if (total == 0) return 0.0;
  return 100.0 * static_cast<double>(total) / static_cast<double>(std::max<std::size_t>(ref, 1));
}

namespace {

struct CeUnit {
  Eigen::MatrixXd features;
  LabelSequence labels;
  std::vector<Symbol> alignment;
};

std::vector<CeUnit> ce_units(const TransducerModel& model, const Corpus& corpus, const TrainConfig& config) {
  std::vector<CeUnit> units;
  const Topology kind = model.topology();
  for (const auto& ex : corpus) {
    const auto it = ex.alignments.find(kind);
    if (it == ex.alignments.end())
      throw ValidationError("sequence '" + ex.id + "' has no " + std::string(topology_name(kind)) +
                            " alignment for frame-wise CE training");
    const auto& symbols = it->second.path.symbols;
    if (collapse(kind, symbols) != ex.labels)
      throw ValidationError("alignment of '" + ex.id + "' does not collapse to its reference");
    if (!config.chunking) {
      units.push_back({ex.features, ex.labels, symbols});
      continue;
    }
    for (auto& c : chunk(kind, ex.features, symbols, config.chunk_size, config.chunk_step,
                         model.config().encoder.pool_factor)) {
      LabelSequence y = collapse(kind, c.alignment);
      units.push_back({std::move(c.features), std::move(y), std::move(c.alignment)});
    }
  }
  return units;
}

}  // namespace

std::vector<EpochMetrics> train(TransducerModel& model, const Corpus& train_set, const Corpus& holdout,
                                const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (train_set.empty()) throw ValidationError("training set is empty");
  const bool full_sum = config.loss_mode == LossMode::kFullSum;
  if (full_sum && !model.config().decoder.lattice_factorizable()) {
    std::string flags;
    for (const auto& f : model.config().decoder.non_factorizable_flags()) flags += " model." + f;
    throw ConfigError("full_sum training needs a lattice-factorizable model (offending flags:" + flags + ")");
  }
  const std::vector<CeUnit> units = full_sum ? std::vector<CeUnit>{} : ce_units(model, train_set, config);
  const std::size_t count = full_sum ? train_set.size() : units.size();

  std::mt19937_64 rng(config.seed);
  Optimizer optimizer(config.optimizer);
  std::vector<std::size_t> order(count);
  std::vector<EpochMetrics> log;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t first = 0; first < count; first += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t last = std::min(count, first + static_cast<std::size_t>(config.batch_size));
      model.zero_grad();
      LossValue value;
      if (full_sum) {
        std::vector<Example> batch;
        for (std::size_t k = first; k < last; ++k) {
          const Example& src = train_set[order[k]];
          Example ex;
          ex.id = src.id;
          ex.features = src.features;
          ex.labels = src.labels;
          if (config.masking.enabled) mask_features(ex.features, config.masking, rng);
          batch.push_back(std::move(ex));
        }
        value = loss_full_sum(model, batch, config, true);
      } else {
        std::vector<Eigen::MatrixXd> features;
        features.reserve(last - first);
        std::vector<AlignedExample> batch;
        for (std::size_t k = first; k < last; ++k) {
          const CeUnit& unit = units[order[k]];
          features.push_back(unit.features);
          if (config.masking.enabled) mask_features(features.back(), config.masking, rng);
          AlignedExample ex;
          ex.labels = unit.labels;
          ex.alignment = unit.alignment;
          ex.feedback = switchout(unit.alignment, config.switchout_prob, model.vocab(), rng);
          batch.push_back(std::move(ex));
        }
        for (std::size_t k = 0; k < batch.size(); ++k) batch[k].features = &features[k];
        value = loss_frame_ce(model, batch, config, true);
      }
      if (!std::isfinite(value.loss))
        throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
      optimizer.step(model.params());
      loss_sum += value.loss;
      ++batches;
    }
    optimizer.end_epoch();
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / std::max(batches, 1);
    m.holdout_error = holdout.empty() ? 0.0 : label_error_rate(model, holdout, config.holdout_beam);
    if (config.record_wall_time)
      m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(model, m);
  }
  return log;
}

// --- alignment ---------------------------------------------------------------------------------

Eigen::VectorXd estimate_prior(const TransducerModel& model, const Corpus& corpus) {
  const int v = model.vocab_size();
  std::vector<Eigen::VectorXd> mass(corpus.size(), Eigen::VectorXd::Zero(v));
  parallel_for(corpus.size(), [&](std::size_t i) {
    const EmissionLattice lat = lattice_emissions(model, corpus[i].features, corpus[i].labels);
    if (!full_sum_nll(lat, corpus[i].labels).reachable) return;
    mass[i] = occupancies(lat, corpus[i].labels).gamma.colwise().sum().transpose();
  });
  Eigen::VectorXd total = Eigen::VectorXd::Zero(v);
  for (const auto& m : mass) total += m;
  const double sum = total.sum();
  if (!(sum > 0.0)) throw ValidationError("cannot estimate a prior: no reachable sequence");
  // Floor keeps the correction finite for symbols that never occur.
  return (total / sum).cwiseMax(1e-10).array().log();
}

AlignResult align_corpus(const TransducerModel& model, const Corpus& corpus,
                         const std::optional<AlignmentPrior>& prior) {
  std::vector<std::optional<AlignmentRecord>> found(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    const EmissionLattice lat = lattice_emissions(model, corpus[i].features, corpus[i].labels);
    if (!is_reachable(model.topology(), lat.frames(), corpus[i].labels)) return;
    found[i] = AlignmentRecord{corpus[i].id, viterbi_align(lat, corpus[i].labels, prior).path};
  });
  AlignResult result;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (found[i])
      result.records.push_back(std::move(*found[i]));
    else
      result.unreachable.push_back(corpus[i].id);
  }
  return result;
}

}  // namespace ltx
