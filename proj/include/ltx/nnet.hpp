#ifndef LTX_NNET_HPP
#define LTX_NNET_HPP

#include "ltx/config.hpp"
#include "ltx/lattice.hpp"
#include "ltx/topology.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ltx {

// A named trainable tensor with its gradient accumulator.
struct Param {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;

  Param() = default;
  Param(std::string param_name, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(param_name)),
        value(Eigen::MatrixXd::Zero(rows, cols)),
        grad(Eigen::MatrixXd::Zero(rows, cols)) {}
};

struct EncoderConfig {
  int input_dim = 0;
  int layers = 1;
  int hidden_dim = 32;
  // Max-pooling over time after the first layer; T = ceil(T' / pool_factor).
  int pool_factor = 1;
  // Every layer adds a reverse-time cell; each direction gets half of
  // hidden_dim and the two are stacked.
  bool bidirectional = false;
};

struct DecoderConfig {
  int slow_dim = 32;
  int fast_dim = 32;
  int readout_dim = 32;
  // FastRNN sees the previous alignment symbol.
  bool label_feedback = false;
  // SlowRNN sees the encoder frame at the last-emit position.
  bool encoder_to_slow = false;
  // Without FastRNN the fast state is the encoder frame h_t.
  bool use_fast_rnn = false;
  // Blank sigmoid times a label softmax instead of one softmax over Σ'.
  bool separate_blank_sigmoid = false;

  // Emissions depend only on (t, n) and the ground-truth label history.
  bool lattice_factorizable() const { return !use_fast_rnn && !encoder_to_slow; }
  // Flags that break lattice factorization, by config key.
  std::vector<std::string> non_factorizable_flags() const;
  void validate() const;
};

struct ModelConfig {
  Topology topology = Topology::kRna;
  Vocab vocab{1};
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::uint64_t seed = 1;

  // "model." section of a ConfigMap; missing keys keep their defaults.
  static ModelConfig from_config(const ConfigMap& cfg);
  ConfigMap to_config() const;
  std::uint64_t digest() const;
  void validate() const;
};

struct EncoderOutput {
  Eigen::MatrixXd h;  // hidden_dim x T, one column per frame
  // Backward caches.
  std::vector<Eigen::MatrixXd> layer_inputs;
  std::vector<Eigen::MatrixXd> layer_states;
  Eigen::MatrixXi pool_argmax;  // source frame of every pooled element

  int frames() const { return static_cast<int>(h.cols()); }
};

// Intermediate values of the readout on a batch of (fast, slow) columns.
struct ReadoutCache {
  Eigen::MatrixXd fast;
  Eigen::MatrixXd slow;
  Eigen::MatrixXd hidden;       // readout_dim x M
  Eigen::MatrixXd head_probs;   // joint softmax (V x M) or label softmax (K x M)
  Eigen::RowVectorXd blank_prob;  // sigmoid(Readout^b), factorized mode only
};

// Emission lattice together with what lattice_backward() needs.
struct LatticeForward {
  EmissionLattice lattice;
  LabelSequence y;
  Eigen::MatrixXd slow_inputs;  // one-hot labels fed to SlowRNN, V x (N+1)
  Eigen::MatrixXd slow;         // slow states, slow_dim x (N+1)
  std::vector<ReadoutCache> readout;  // one per n
};

// Teacher-forced pass along one alignment.
struct AlignedForward {
  std::vector<Symbol> symbols;   // CE targets α_1..α_U
  std::vector<Symbol> feedback;  // label inputs (possibly switched out)
  std::vector<NodeIndex> nodes;  // (t_u, n_u)
  int frames = 0;                // encoder frames T
  Eigen::MatrixXd log_probs;     // V x U
  // Slow recurrence inputs/states, one column per label count reached.
  std::vector<Eigen::MatrixXd> slow_inputs;
  Eigen::MatrixXd slow;
  // Fast recurrence inputs/states, one column per step.
  std::vector<Eigen::MatrixXd> fast_inputs;
  Eigen::MatrixXd fast;
  ReadoutCache readout;
};

// Decoder state between two alignment steps.
struct DecoderState {
  Eigen::VectorXd fast;  // s^fast of the previous step (zero initially)
  Eigen::VectorXd slow;  // s^slow for the current label count
  int t = 0;             // current frame
  int n = 0;             // labels emitted so far
  int u = 0;             // steps taken so far
  int last_emit = 0;     // u': first step index with the current n
  Symbol prev = kBlank;  // α_{u-1}
  Symbol last_label = kBlank;  // y_n (blank sentinel for n = 0)
};

struct StepOutput {
  Eigen::VectorXd log_probs;  // over Σ'
  Eigen::VectorXd fast;       // s^fast_u
};

class TransducerModel {
 public:
  TransducerModel() = default;
  explicit TransducerModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  Topology topology() const { return config_.topology; }
  const Vocab& vocab() const { return config_.vocab; }
  int vocab_size() const { return config_.vocab.size(); }

  // All parameters in a fixed order.
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;
  void zero_grad();
  std::size_t num_params() const;

  // x is T' x D with one row per input frame. Throws on empty input.
  EncoderOutput encode(const Eigen::MatrixXd& x) const;
  // Accumulates parameter gradients; returns dL/dx (T' x D).
  Eigen::MatrixXd encode_backward(const EncoderOutput& enc, const Eigen::MatrixXd& dh);

  // SlowRNN / FastRNN single steps on column vectors.
  Eigen::VectorXd slow_step(const Eigen::VectorXd& state, Symbol y_prev,
                            const Eigen::VectorXd& h_at_last_emit) const;
  Eigen::VectorXd fast_step(const Eigen::VectorXd& state, const Eigen::VectorXd& slow,
                            Symbol alpha_prev, const Eigen::VectorXd& h_t) const;
  // Log-probabilities over Σ' from one (fast, slow) pair.
  Eigen::VectorXd emit_distribution(const Eigen::VectorXd& fast,
                                    const Eigen::VectorXd& slow) const;

  // Batched readout; columns of fast/slow are independent cases.
  Eigen::MatrixXd readout_forward(const Eigen::MatrixXd& fast, const Eigen::MatrixXd& slow,
                                  ReadoutCache* cache) const;
  // g = dL/dlog_probs (V x M). Returns dL/dfast and dL/dslow.
  void readout_backward(const ReadoutCache& cache, const Eigen::MatrixXd& g,
                        Eigen::MatrixXd* dfast, Eigen::MatrixXd* dslow);

  // Requires a lattice-factorizable config (ConfigError otherwise).
  LatticeForward lattice_forward(const EncoderOutput& enc, const LabelSequence& y) const;
  // dtable = dL/dlattice table. Returns dL/dh.
  Eigen::MatrixXd lattice_backward(const LatticeForward& fwd, const Eigen::MatrixXd& dtable);

  // feedback defaults to the symbols themselves when empty.
  AlignedForward aligned_forward(const EncoderOutput& enc, const std::vector<Symbol>& symbols,
                                 const std::vector<Symbol>& feedback = {}) const;
  // g = dL/dlog_probs (V x U). Returns dL/dh.
  Eigen::MatrixXd aligned_backward(const AlignedForward& fwd, const Eigen::MatrixXd& g);

  // Stepwise decoding interface.
  DecoderState initial_state(const Eigen::MatrixXd& h) const;
  StepOutput step(const Eigen::MatrixXd& h, const DecoderState& state) const;
  DecoderState advance(const Eigen::MatrixXd& h, const DecoderState& state,
                       const StepOutput& out, Symbol symbol) const;

  // Auxiliary CTC head: linear softmax over Σ' on every encoder frame.
  Eigen::MatrixXd aux_log_probs(const Eigen::MatrixXd& h) const;  // V x T
  // g = dL/dlog_probs (V x T). Returns dL/dh.
  Eigen::MatrixXd aux_backward(const Eigen::MatrixXd& h, const Eigen::MatrixXd& log_probs,
                               const Eigen::MatrixXd& g);

 private:
  struct Recurrent {
    std::vector<Param> inputs;
    Param rec;
    Param bias;
  };

  Eigen::MatrixXd recurrent_forward(const Recurrent& cell,
                                    const std::vector<Eigen::MatrixXd>& inputs) const;
  std::vector<Eigen::MatrixXd> recurrent_backward(Recurrent& cell,
                                                  const std::vector<Eigen::MatrixXd>& inputs,
                                                  const Eigen::MatrixXd& states,
                                                  Eigen::MatrixXd dstates);
  Eigen::VectorXd one_hot(Symbol s) const;

  ModelConfig config_;
  std::vector<Recurrent> encoder_;
  std::vector<Recurrent> encoder_rev_;
  Recurrent slow_;
  Recurrent fast_;
  Param readout_fast_, readout_slow_, readout_bias_;
  Param blank_w_, blank_b_, label_w_, label_b_;
  Param joint_w_, joint_b_;
  Param aux_w_, aux_b_;
};

// Split a distribution over Σ' into p(blank) and the label-conditional q.
// Throws ValidationError when p(blank) = 1.
struct FactorizedDistribution {
  double blank = 0.0;
  Eigen::VectorXd labels;  // q over Σ, sums to 1
};
FactorizedDistribution joint_to_factorized(const Eigen::VectorXd& p);
Eigen::VectorXd factorized_to_joint(const FactorizedDistribution& f);

// Convenience wrapper: encode x and build the emission lattice for y.
EmissionLattice lattice_emissions(const TransducerModel& model, const Eigen::MatrixXd& x,
                                  const LabelSequence& y);

// --- checkpoints ----------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'L', 'T', 'X', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TransducerModel& model, const std::filesystem::path& path);
TransducerModel load_checkpoint(const std::filesystem::path& path);

struct ImportReport {
  std::vector<std::string> imported;
  std::vector<std::string> skipped;
};

// Copies every parameter whose name starts with one of the prefixes from
// `source` into `model`. The prefix "." selects everything. Throws
// ValidationError naming the parameter on shape mismatch.
ImportReport import_params(TransducerModel& model, const TransducerModel& source,
                           const std::vector<std::string>& prefixes);

}  // namespace ltx

#endif  // LTX_NNET_HPP
