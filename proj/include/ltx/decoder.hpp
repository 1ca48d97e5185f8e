#ifndef LTX_DECODER_HPP
#define LTX_DECODER_HPP

#include "ltx/dataio.hpp"
#include "ltx/lattice.hpp"
#include "ltx/nnet.hpp"
#include "ltx/topology.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace ltx {

enum class MergeMode { kNone, kSum, kMax };

std::string_view merge_mode_name(MergeMode mode);
MergeMode parse_merge_mode(std::string_view tag);

inline constexpr int kDefaultBeamSize = 12;
inline constexpr double kDefaultRatioCap = 3.0;

// Source of per-step distributions for the search.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual Topology topology() const = 0;
  virtual int frames() const = 0;
  virtual int vocab_size() const = 0;
  virtual DecoderState initial_state() const = 0;
  virtual StepOutput step(const DecoderState& state) const = 0;
  virtual DecoderState advance(const DecoderState& state, const StepOutput& out,
                               Symbol symbol) const = 0;
};

class ModelScorer : public StepScorer {
 public:
  // Keeps references; both must outlive the scorer.
  ModelScorer(const TransducerModel& model, const Eigen::MatrixXd& h) : model_(model), h_(h) {}

  Topology topology() const override { return model_.topology(); }
  int frames() const override { return static_cast<int>(h_.cols()); }
  int vocab_size() const override { return model_.vocab_size(); }
  DecoderState initial_state() const override { return model_.initial_state(h_); }
  StepOutput step(const DecoderState& state) const override { return model_.step(h_, state); }
  DecoderState advance(const DecoderState& state, const StepOutput& out,
                       Symbol symbol) const override {
    return model_.advance(h_, state, out, symbol);
  }

 private:
  const TransducerModel& model_;
  const Eigen::MatrixXd& h_;
};

// Reads a dumped lattice as a model whose emissions depend on (t, n) only.
// Label counts beyond the lattice's N get probability zero.
class LatticeScorer : public StepScorer {
 public:
  explicit LatticeScorer(const EmissionLattice& lattice) : lattice_(lattice) {}

  Topology topology() const override { return lattice_.kind(); }
  int frames() const override { return lattice_.frames(); }
  int vocab_size() const override { return lattice_.vocab_size(); }
  DecoderState initial_state() const override { return {}; }
  StepOutput step(const DecoderState& state) const override;
  DecoderState advance(const DecoderState& state, const StepOutput& out,
                       Symbol symbol) const override;

 private:
  const EmissionLattice& lattice_;
};

struct Hypothesis {
  std::vector<Symbol> path;
  double log_score = 0.0;
  DecoderState state;
  std::string key;
  bool finished = false;
};

struct BeamOptions {
  int beam_size = kDefaultBeamSize;
  MergeMode merge = MergeMode::kNone;
  // RNN-T may emit at most ceil(ratio_cap * T) labels.
  double ratio_cap = kDefaultRatioCap;
  const BpeMergeMap* merges = nullptr;
  const Vocab* vocab = nullptr;  // label names for keys; ids when null
};

struct DecodeResult {
  AlignmentPath path;
  LabelSequence labels;
  std::vector<std::string> words;
  double log_score = kLogZero<double>;
};

// Collapse, drop blanks, map to label names and apply the BPE merges.
std::vector<std::string> hypothesis_words(Topology kind, const std::vector<Symbol>& path,
                                          const Vocab* vocab, const BpeMergeMap* merges);
std::string canonical_key(Topology kind, const std::vector<Symbol>& path, const Vocab* vocab,
                          const BpeMergeMap* merges);

// Merges hypotheses sharing a canonical key (and, for RNN-T, the frame
// index). The best member survives; sum mode gives it the logsumexp of the
// group. Output order follows the first occurrence of each group.
std::vector<Hypothesis> recombine(std::vector<Hypothesis> beam, MergeMode mode, Topology kind);

// Sorts by score (descending), then key, then path under tie_rank().
void sort_beam(std::vector<Hypothesis>& beam);

DecodeResult beam_search(const StepScorer& scorer, const BeamOptions& options);
DecodeResult beam_search(const TransducerModel& model, const Eigen::MatrixXd& x,
                         const BeamOptions& options);

}  // namespace ltx

#endif  // LTX_DECODER_HPP
