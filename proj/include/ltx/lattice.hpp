#ifndef LTX_LATTICE_HPP
#define LTX_LATTICE_HPP

#include "ltx/logspace.hpp"
#include "ltx/topology.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>

namespace ltx {

// Emission log-probabilities over Σ' for every lattice node (t, n),
// t in [0, T), n in [0, N]. Row t*(N+1)+n of the table holds the node's
// distribution. For CTC the dynamic program runs over the blank-interleaved
// extended label sequence and reads its arc weights from these rows.
class EmissionLattice {
 public:
  EmissionLattice() = default;
  EmissionLattice(Topology kind, int frames, int labels, int vocab_size,
                  bool normalized = true);

  Topology kind() const { return kind_; }
  int frames() const { return frames_; }
  int labels() const { return labels_; }
  int vocab_size() const { return static_cast<int>(table_.cols()); }
  // Unnormalized lattices skip the per-node normalization check.
  bool normalized() const { return normalized_; }
  void set_normalized(bool v) { normalized_ = v; }

  int row(int t, int n) const { return t * (labels_ + 1) + n; }
  double& at(int t, int n, Symbol s) { return table_(row(t, n), s); }
  double at(int t, int n, Symbol s) const { return table_(row(t, n), s); }
  auto node(int t, int n) { return table_.row(row(t, n)); }
  auto node(int t, int n) const { return table_.row(row(t, n)); }

  Eigen::MatrixXd& table() { return table_; }
  const Eigen::MatrixXd& table() const { return table_; }

  // Throws ValidationError on NaN, on +inf, or (normalized mode) on a node
  // whose logsumexp differs from 0 by more than tol.
  void validate(double tol = 1e-6) const;

 private:
  Topology kind_ = Topology::kRna;
  int frames_ = 0;
  int labels_ = 0;
  bool normalized_ = true;
  Eigen::MatrixXd table_;
};

struct ForwardResult {
  double nll = std::numeric_limits<double>::infinity();
  bool reachable = false;
  // Forward log-sums per DP state. RNA: (T+1) x (N+1) indexed by frames
  // consumed and labels emitted; RNN-T: T x (N+1) by current frame and
  // labels emitted; CTC: (T+1) x (2N+1) by frames consumed and extended
  // label position.
  Eigen::MatrixXd alpha;
};

struct OccupancyGrid {
  // Same layout as EmissionLattice::table(): posterior arc probability per
  // (t, n, symbol). The gradient of the NLL w.r.t. the table is -gamma.
  Eigen::MatrixXd gamma;
  double nll = 0.0;
};

struct ViterbiResult {
  AlignmentPath path;
  double score = kLogZero<double>;
};

// Additive per-symbol log prior for the prior-corrected alignment. Arc
// scores become log_prob - scale * log_prior[symbol].
struct AlignmentPrior {
  Eigen::VectorXd log_prior;
  double scale = 1.0;
};

ForwardResult full_sum_nll(const EmissionLattice& lattice, const LabelSequence& y);

// Throws UnreachableError when p(y | x) = 0.
OccupancyGrid occupancies(const EmissionLattice& lattice, const LabelSequence& y);

// Arg-max path; on equal scores the non-blank arc wins, then the smaller
// label id (first differing step decides).
ViterbiResult viterbi_align(const EmissionLattice& lattice, const LabelSequence& y,
                            const std::optional<AlignmentPrior>& prior = std::nullopt);

// Summed log-probability of one path, read off the lattice by replaying
// the (t, n) nodes the path visits.
double path_log_prob(const EmissionLattice& lattice, const std::vector<Symbol>& symbols,
                     const std::optional<AlignmentPrior>& prior = std::nullopt);

// Exact sum over enumerate_paths(); the test oracle for full_sum_nll.
double brute_force_nll(Topology kind, int frames, const LabelSequence& y,
                       const EmissionLattice& lattice,
                       std::uint64_t cap = kDefaultEnumerationCap);

}  // namespace ltx

#endif  // LTX_LATTICE_HPP
