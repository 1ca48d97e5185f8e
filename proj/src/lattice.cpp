#include "ltx/lattice.hpp"

#include "ltx/error.hpp"

#include <cmath>
#include <string>

namespace ltx {

EmissionLattice::EmissionLattice(Topology kind, int frames, int labels,
                                 int vocab_size, bool normalized)
    : kind_(kind), frames_(frames), labels_(labels), normalized_(normalized) {
  if (frames < 1 || labels < 0 || vocab_size < 2)
    throw DimensionError("bad lattice dimensions");
  table_.setConstant(static_cast<Eigen::Index>(frames) * (labels + 1), vocab_size,
                     kLogZero<double>);
}

void EmissionLattice::validate(double tol) const {
  for (Eigen::Index r = 0; r < table_.rows(); ++r) {
    for (Eigen::Index c = 0; c < table_.cols(); ++c) {
      const double v = table_(r, c);
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw ValidationError("lattice entry is NaN or +inf at row " + std::to_string(r));
    }
    if (normalized_ && std::abs(logsumexp(table_.row(r))) > tol)
      throw ValidationError("lattice node " + std::to_string(r) + " is not normalized");
  }
}

namespace {

// The alignment DAG for one (topology, T, y). Nodes are numbered in
// topological order; arcs are grouped by source node.
struct Arc {
  int to;
  int row;  // lattice row of the emitting node
  Symbol symbol;
};

struct Graph {
  int num_nodes = 0;
  int start = 0;
  std::vector<int> finals;
  std::vector<int> offsets;  // arcs of node i: [offsets[i], offsets[i+1])
  std::vector<Arc> arcs;
  int state_rows = 0;  // alpha matrix shape
  int state_cols = 0;
};

class GraphBuilder {
 public:
  explicit GraphBuilder(int num_nodes) { g_.num_nodes = num_nodes; }
  void begin_node(int node) {
    while (static_cast<int>(g_.offsets.size()) <= node)
      g_.offsets.push_back(static_cast<int>(g_.arcs.size()));
  }
  void add(int to, int row, Symbol s) { g_.arcs.push_back(Arc{to, row, s}); }
  Graph finish() {
    begin_node(g_.num_nodes);
    return std::move(g_);
  }
  Graph& graph() { return g_; }

 private:
  Graph g_;
};

Graph build_graph(Topology kind, int frames, const LabelSequence& y) {
  const int big_n = static_cast<int>(y.size());
  const int width = big_n + 1;
  auto row = [&](int t, int n) { return t * width + n; };

  switch (kind) {
    case Topology::kRna: {
      GraphBuilder b((frames + 1) * width);
      for (int t = 0; t <= frames; ++t) {
        for (int n = 0; n <= big_n; ++n) {
          const int node = t * width + n;
          b.begin_node(node);
          if (t == frames) continue;
          if (n < big_n) b.add(node + width + 1, row(t, n), y[n]);
          b.add(node + width, row(t, n), kBlank);
        }
      }
      b.graph().finals = {frames * width + big_n};
      b.graph().state_rows = frames + 1;
      b.graph().state_cols = width;
      return b.finish();
    }
    case Topology::kRnnt: {
      const int final_node = frames * width;
      GraphBuilder b(final_node + 1);
      for (int t = 0; t < frames; ++t) {
        for (int n = 0; n <= big_n; ++n) {
          const int node = t * width + n;
          b.begin_node(node);
          if (n < big_n) b.add(node + 1, row(t, n), y[n]);
          if (t + 1 < frames)
            b.add(node + width, row(t, n), kBlank);
          else if (n == big_n)
            b.add(final_node, row(t, n), kBlank);
        }
      }
      b.begin_node(final_node);
      b.graph().finals = {final_node};
      b.graph().state_rows = frames;
      b.graph().state_cols = width;
      return b.finish();
    }
    case Topology::kCtc: {
      const int ext = 2 * big_n + 1;
      GraphBuilder b((frames + 1) * ext);
      for (int t = 0; t <= frames; ++t) {
        for (int s = 0; s < ext; ++s) {
          const int node = t * ext + s;
          b.begin_node(node);
          if (t == frames) continue;
          const int next = node + ext;
          if (s % 2 == 0) {
            const int k = s / 2;  // labels emitted so far, last symbol blank
            if (k < big_n) b.add(next + 1, row(t, k), y[k]);
            b.add(next, row(t, k), kBlank);
          } else {
            const int k = (s + 1) / 2;  // last symbol is y[k-1]
            if (k < big_n && y[k] != y[k - 1]) b.add(next + 2, row(t, k), y[k]);
            b.add(next, row(t, k), y[k - 1]);
            b.add(next + 1, row(t, k), kBlank);
          }
        }
      }
      auto& g = b.graph();
      g.finals = {frames * ext + 2 * big_n};
      if (big_n > 0) g.finals.push_back(frames * ext + 2 * big_n - 1);
      g.state_rows = frames + 1;
      g.state_cols = ext;
      return b.finish();
    }
  }
  throw ConfigError("unknown topology");
}

void check_dimensions(const EmissionLattice& lattice, const LabelSequence& y) {
  if (lattice.labels() != static_cast<int>(y.size()))
    throw DimensionError("lattice covers " + std::to_string(lattice.labels()) +
                         " labels but target has " + std::to_string(y.size()));
  for (Symbol s : y)
    if (s <= 0 || s >= lattice.vocab_size())
      throw DimensionError("target symbol " + std::to_string(s) + " outside vocabulary");
}

std::vector<double> forward(const Graph& g, const Eigen::MatrixXd& table) {
  std::vector<double> alpha(g.num_nodes, kLogZero<double>);
  alpha[g.start] = 0.0;
  for (int node = 0; node < g.num_nodes; ++node) {
    const double a = alpha[node];
    if (is_log_zero(a)) continue;
    for (int i = g.offsets[node]; i < g.offsets[node + 1]; ++i) {
      const Arc& arc = g.arcs[i];
      alpha[arc.to] = log_add(alpha[arc.to], log_mul(a, table(arc.row, arc.symbol)));
    }
  }
  return alpha;
}

std::vector<double> backward(const Graph& g, const Eigen::MatrixXd& table) {
  std::vector<double> beta(g.num_nodes, kLogZero<double>);
  for (int f : g.finals) beta[f] = 0.0;
  for (int node = g.num_nodes - 1; node >= 0; --node) {
    double acc = beta[node];
    for (int i = g.offsets[node]; i < g.offsets[node + 1]; ++i) {
      const Arc& arc = g.arcs[i];
      acc = log_add(acc, log_mul(table(arc.row, arc.symbol), beta[arc.to]));
    }
    beta[node] = acc;
  }
  return beta;
}

double total_log_prob(const Graph& g, const std::vector<double>& alpha) {
  double z = kLogZero<double>;
  for (int f : g.finals) z = log_add(z, alpha[f]);
  return z;
}

Eigen::MatrixXd adjusted_table(const EmissionLattice& lattice,
                               const std::optional<AlignmentPrior>& prior) {
  Eigen::MatrixXd table = lattice.table();
  if (!prior || prior->scale == 0.0) return table;
  if (prior->log_prior.size() != lattice.vocab_size())
    throw DimensionError("prior size does not match vocabulary");
  for (Eigen::Index c = 0; c < table.cols(); ++c) {
    const double shift = prior->scale * prior->log_prior(c);
    for (Eigen::Index r = 0; r < table.rows(); ++r)
      if (!is_log_zero(table(r, c))) table(r, c) -= shift;
  }
  return table;
}

}  // namespace

ForwardResult full_sum_nll(const EmissionLattice& lattice, const LabelSequence& y) {
  check_dimensions(lattice, y);
  ForwardResult out;
  const Graph g = build_graph(lattice.kind(), lattice.frames(), y);
  const std::vector<double> alpha = forward(g, lattice.table());
  out.alpha = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      alpha.data(), g.state_rows, g.state_cols);
  const double z = total_log_prob(g, alpha);
  out.reachable = !is_log_zero(z);
  out.nll = out.reachable ? -z : std::numeric_limits<double>::infinity();
  return out;
}

OccupancyGrid occupancies(const EmissionLattice& lattice, const LabelSequence& y) {
  check_dimensions(lattice, y);
  const Graph g = build_graph(lattice.kind(), lattice.frames(), y);
  const Eigen::MatrixXd& table = lattice.table();
  const std::vector<double> alpha = forward(g, table);
  const std::vector<double> beta = backward(g, table);
  const double z = total_log_prob(g, alpha);
  if (is_log_zero(z)) throw UnreachableError("target is unreachable in this lattice");

  OccupancyGrid out;
  out.nll = -z;
  out.gamma.setZero(table.rows(), table.cols());
  for (int node = 0; node < g.num_nodes; ++node) {
    if (is_log_zero(alpha[node])) continue;
    for (int i = g.offsets[node]; i < g.offsets[node + 1]; ++i) {
      const Arc& arc = g.arcs[i];
      const double lp = log_mul(log_mul(alpha[node], table(arc.row, arc.symbol)), beta[arc.to]);
      if (!is_log_zero(lp)) out.gamma(arc.row, arc.symbol) += std::exp(lp - z);
    }
  }
  return out;
}

ViterbiResult viterbi_align(const EmissionLattice& lattice, const LabelSequence& y,
                            const std::optional<AlignmentPrior>& prior) {
  check_dimensions(lattice, y);
  const Graph g = build_graph(lattice.kind(), lattice.frames(), y);
  const Eigen::MatrixXd table = adjusted_table(lattice, prior);

  // Best completion score from every node, then a forward trace that picks
  // the preferred symbol among the optimal arcs. This yields the
  // lexicographically smallest optimal path under tie_rank().
  std::vector<double> best(g.num_nodes, kLogZero<double>);
  for (int f : g.finals) best[f] = 0.0;
  for (int node = g.num_nodes - 1; node >= 0; --node) {
    double b = best[node];
    for (int i = g.offsets[node]; i < g.offsets[node + 1]; ++i) {
      const Arc& arc = g.arcs[i];
      b = std::max(b, log_mul(table(arc.row, arc.symbol), best[arc.to]));
    }
    best[node] = b;
  }
  if (is_log_zero(best[g.start])) throw UnreachableError("target is unreachable in this lattice");

  ViterbiResult out;
  out.path.kind = lattice.kind();
  out.path.frames = lattice.frames();
  out.path.labels = static_cast<int>(y.size());
  double score = 0.0;
  int node = g.start;
  // Final nodes have no outgoing arcs.
  while (g.offsets[node] != g.offsets[node + 1]) {
    const double target = best[node];
    const double tol = 1e-12 * std::max(1.0, std::abs(target));
    const Arc* chosen = nullptr;
    for (int i = g.offsets[node]; i < g.offsets[node + 1]; ++i) {
      const Arc& arc = g.arcs[i];
      const double total = log_mul(table(arc.row, arc.symbol), best[arc.to]);
      if (is_log_zero(total) || total < target - tol) continue;
      if (!chosen || tie_rank(arc.symbol) < tie_rank(chosen->symbol)) chosen = &arc;
    }
    if (!chosen) break;
    out.path.symbols.push_back(chosen->symbol);
    score += table(chosen->row, chosen->symbol);
    node = chosen->to;
  }
  out.score = score;
  return out;
}

double path_log_prob(const EmissionLattice& lattice, const std::vector<Symbol>& symbols,
                     const std::optional<AlignmentPrior>& prior) {
  const auto nodes = replay_nodes(lattice.kind(), symbols);
  const bool use_prior = prior && prior->scale != 0.0;
  double score = 0.0;
  for (std::size_t u = 0; u < symbols.size(); ++u) {
    const auto [t, n] = nodes[u];
    if (t >= lattice.frames() || n > lattice.labels()) return kLogZero<double>;
    double w = lattice.at(t, n, symbols[u]);
    if (use_prior && !is_log_zero(w)) w -= prior->scale * prior->log_prior(symbols[u]);
    score = log_mul(score, w);
  }
  return score;
}

double brute_force_nll(Topology kind, int frames, const LabelSequence& y,
                       const EmissionLattice& lattice, std::uint64_t cap) {
  check_dimensions(lattice, y);
  Vocab vocab(lattice.vocab_size() - 1);
  const auto paths = enumerate_paths(kind, frames, y, vocab, cap);
  std::vector<double> scores;
  scores.reserve(paths.size());
  for (const auto& p : paths) scores.push_back(path_log_prob(lattice, p.symbols));
  const double z = logsumexp<double>(scores);
  return is_log_zero(z) ? std::numeric_limits<double>::infinity() : -z;
}

}  // namespace ltx
