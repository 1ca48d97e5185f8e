#include "ltx/topology.hpp"

#include "ltx/error.hpp"

#include <algorithm>

namespace ltx {

std::string_view topology_name(Topology kind) {
  switch (kind) {
    case Topology::kCtc: return "ctc";
    case Topology::kRna: return "rna";
    case Topology::kRnnt: return "rnnt";
  }
  return "?";
}

Topology parse_topology(std::string_view tag) {
  if (tag == "ctc") return Topology::kCtc;
  if (tag == "rna") return Topology::kRna;
  if (tag == "rnnt") return Topology::kRnnt;
  throw ConfigError("unknown topology '" + std::string(tag) + "'");
}

namespace {

std::string default_name(int id) {
  if (id <= 26) return std::string(1, static_cast<char>('a' + id - 1));
  return "w" + std::to_string(id);
}

}  // namespace

Vocab::Vocab(int num_labels) {
  if (num_labels < 1) throw ConfigError("vocabulary needs at least one label");
  names_.reserve(num_labels);
  for (int i = 1; i <= num_labels; ++i) names_.push_back(default_name(i));
}

Vocab::Vocab(std::vector<std::string> label_names) : names_(std::move(label_names)) {
  if (names_.empty()) throw ConfigError("vocabulary needs at least one label");
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw ConfigError("empty label name");
    if (std::find(names_.begin(), names_.begin() + i, names_[i]) != names_.begin() + i)
      throw ConfigError("duplicate label name '" + names_[i] + "'");
  }
}

const std::string& Vocab::name(Symbol s) const {
  static const std::string blank = "<b>";
  if (s == kBlank) return blank;
  if (!is_label(s)) throw ValidationError("symbol id out of range: " + std::to_string(s));
  return names_[s - 1];
}

Symbol Vocab::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<Symbol>(i + 1);
  return -1;
}

int delta_t(Topology kind, Symbol symbol) {
  if (kind == Topology::kRnnt) return symbol == kBlank ? 1 : 0;
  return 1;
}

int delta_n(Topology kind, Symbol symbol, Symbol prev) {
  if (symbol == kBlank) return 0;
  if (kind == Topology::kCtc) return symbol != prev ? 1 : 0;
  return 1;
}

LabelSequence collapse(Topology kind, const std::vector<Symbol>& symbols) {
  LabelSequence out;
  Symbol prev = kBlank;
  for (Symbol s : symbols) {
    if (delta_n(kind, s, prev)) out.push_back(s);
    prev = s;
  }
  return out;
}

int path_length(Topology kind, int frames, int labels) {
  return kind == Topology::kRnnt ? frames + labels : frames;
}

int min_frames(Topology kind, const LabelSequence& y) {
  const int n = static_cast<int>(y.size());
  switch (kind) {
    case Topology::kCtc: {
      int repeats = 0;
      for (std::size_t i = 1; i < y.size(); ++i) repeats += y[i] == y[i - 1];
      return std::max(1, n + repeats);
    }
    case Topology::kRna: return std::max(1, n);
    case Topology::kRnnt: return 1;
  }
  return 1;
}

int replay_frames(Topology kind, const std::vector<Symbol>& symbols) {
  int t = 0;
  for (Symbol s : symbols) t += delta_t(kind, s);
  return t;
}

bool is_valid_path(Topology kind, const std::vector<Symbol>& symbols,
                   int frames, const LabelSequence& y) {
  if (frames < 1) return false;
  const int u = static_cast<int>(symbols.size());
  if (u != path_length(kind, frames, static_cast<int>(y.size()))) return false;
  if (replay_frames(kind, symbols) != frames) return false;
  if (kind == Topology::kRnnt && symbols.back() != kBlank) return false;
  return collapse(kind, symbols) == y;
}

std::vector<NodeIndex> replay_nodes(Topology kind,
                                    const std::vector<Symbol>& symbols) {
  std::vector<NodeIndex> nodes;
  nodes.reserve(symbols.size());
  NodeIndex at;
  Symbol prev = kBlank;
  for (Symbol s : symbols) {
    nodes.push_back(at);
    at.t += delta_t(kind, s);
    at.n += delta_n(kind, s, prev);
    prev = s;
  }
  return nodes;
}

std::vector<int> last_emit_steps(Topology kind,
                                 const std::vector<Symbol>& symbols) {
  std::vector<int> out(symbols.size());
  int first_of_count = 0;
  Symbol prev = kBlank;
  for (std::size_t u = 0; u < symbols.size(); ++u) {
    if (u > 0 && delta_n(kind, symbols[u - 1], prev)) first_of_count = static_cast<int>(u);
    if (u > 0) prev = symbols[u - 1];
    out[u] = first_of_count;
  }
  return out;
}

std::vector<AlignmentPath> enumerate_paths(Topology kind, int frames,
                                           const LabelSequence& y,
                                           const Vocab& vocab,
                                           std::uint64_t cap) {
  const int labels = static_cast<int>(y.size());
  const int length = path_length(kind, frames, labels);
  const auto base = static_cast<std::uint64_t>(vocab.size());
  std::uint64_t total = 1;
  for (int i = 0; i < length; ++i) {
    if (total > cap / base) throw CapExceededError("path enumeration cap exceeded");
    total *= base;
  }

  std::vector<AlignmentPath> out;
  if (frames < 1) return out;
  std::vector<Symbol> digits(length, 0);
  for (std::uint64_t code = 0; code < total; ++code) {
    std::uint64_t rest = code;
    // Most significant digit first so the output is in lexicographic id order.
    for (int i = length - 1; i >= 0; --i) {
      digits[i] = static_cast<Symbol>(rest % base);
      rest /= base;
    }
    if (is_valid_path(kind, digits, frames, y))
      out.push_back(AlignmentPath{kind, digits, frames, labels});
  }
  return out;
}

}  // namespace ltx
