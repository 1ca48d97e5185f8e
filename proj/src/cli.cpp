#include "ltx/cli.hpp"

#include "ltx/error.hpp"
#include "ltx/parallel.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace ltx::cli {

namespace fs = std::filesystem;

int exit_code(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitConfig;
}

// --- configuration ---------------------------------------------------------------

DataSplits data_config(const ConfigMap& cfg) {
  DataSplits d;
  auto& t = d.task;
  t.num_labels = static_cast<int>(cfg.get_int("data.num_labels", t.num_labels));
  t.min_frames = static_cast<int>(cfg.get_int("data.min_frames", t.min_frames));
  t.max_frames = static_cast<int>(cfg.get_int("data.max_frames", t.max_frames));
  t.dwell = cfg.get_double("data.dwell", t.dwell);
  t.blank_gap_prob = cfg.get_double("data.blank_gap_prob", t.blank_gap_prob);
  t.noise = cfg.get_double("data.noise", t.noise);
  t.feature_dim = static_cast<int>(cfg.get_int("data.feature_dim", t.feature_dim));
  t.sequences_per_recording =
      static_cast<int>(cfg.get_int("data.sequences_per_recording", t.sequences_per_recording));
  t.seed = static_cast<std::uint64_t>(cfg.get_int("data.seed", static_cast<long>(t.seed)));
  d.train = static_cast<int>(cfg.get_int("data.train_sequences", d.train));
  d.dev = static_cast<int>(cfg.get_int("data.dev_sequences", d.dev));
  d.test = static_cast<int>(cfg.get_int("data.test_sequences", d.test));
  if (d.train < 0 || d.dev < 0 || d.test < 0) throw ConfigError("data split sizes must be >= 0");
  t.sequences = std::max(1, d.train);
  t.validate();
  return d;
}

ModelConfig model_config(const ConfigMap& cfg) {
  ConfigMap filled = cfg;
  const DataSplits data = data_config(cfg);
  if (!filled.has("model.input_dim"))
    filled.set("model.input_dim",
               std::to_string(data.task.feature_dim > 0 ? data.task.feature_dim : data.task.num_labels + 1));
  if (!filled.has("model.num_labels") && !filled.has("model.labels"))
    filled.set("model.num_labels", std::to_string(data.task.num_labels));
  return ModelConfig::from_config(filled);
}

DecodeConfig decode_config(const ConfigMap& cfg) {
  DecodeConfig d;
  d.beam_size = static_cast<int>(cfg.get_int("decode.beam_size", d.beam_size));
  d.merge = parse_merge_mode(cfg.get_string("decode.merge", "none"));
  d.ratio_cap = cfg.get_double("decode.ratio_cap", d.ratio_cap);
  if (auto m = cfg.find("decode.merges")) d.merges = fs::path(*m);
  if (d.beam_size < 1) throw ConfigError("decode.beam_size must be >= 1");
  if (!(d.ratio_cap > 0.0)) throw ConfigError("decode.ratio_cap must be positive");
  return d;
}

// --- helpers -------------------------------------------------------------------------

namespace {

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  if (fs::is_directory(dir, ec)) return;
  const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
  if (!fs::is_directory(parent, ec)) throw IoError("parent directory does not exist: " + parent.string());
  if (!fs::create_directory(dir, ec) && !fs::is_directory(dir))
    throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

Corpus load_split(const fs::path& dir, const std::string& split, const Vocab& vocab) {
  return read_corpus(CorpusFiles{dir, split}, vocab);
}

void attach_alignments(Corpus& corpus, Topology kind, const std::vector<AlignmentRecord>& records) {
  std::map<std::string, const AlignmentRecord*> by_id;
  for (const auto& r : records) {
    if (r.path.kind != kind)
      throw ValidationError("alignment of '" + r.id + "' has topology " + std::string(topology_name(r.path.kind)) +
                            ", the model uses " + std::string(topology_name(kind)));
    by_id[r.id] = &r;
  }
  for (auto& ex : corpus) {
    ex.alignments.clear();
    const auto it = by_id.find(ex.id);
    if (it == by_id.end()) continue;
    ex.alignments[kind] = *it->second;
  }
}

Transcripts reference_words(const Corpus& corpus, const Vocab& vocab) {
  Transcripts refs;
  for (const auto& ex : corpus) refs.emplace_back(ex.id, label_words(vocab, ex.labels));
  return refs;
}

}  // namespace

// --- commands ----------------------------------------------------------------------

void gen_data(const ConfigMap& cfg, const fs::path& out_dir) {
  const DataSplits data = data_config(cfg);
  ensure_directory(out_dir);
  const Vocab vocab = model_config(cfg).vocab;
  if (vocab.num_labels() != data.task.num_labels)
    throw ConfigError("model label count differs from data.num_labels");
  const std::pair<const char*, int> splits[] = {{"train", data.train}, {"dev", data.dev}, {"test", data.test}};
  std::uint64_t offset = 0;
  for (const auto& [name, count] : splits) {
    SyntheticTaskConfig task = data.task;
    task.sequences = count;
    task.id_prefix = name;
    task.seed = data.task.seed + offset++;
    if (count == 0) continue;
    write_corpus(CorpusFiles{out_dir, name}, generate_corpus(task), vocab);
  }
}

TrainReport train_command(const ConfigMap& cfg, const TrainOptions& options, std::ostream& log) {
  const ModelConfig mc = model_config(cfg);
  const TrainConfig tc = TrainConfig::from_config(cfg);
  tc.validate();
  Corpus train_set = load_split(options.data_dir, "train", mc.vocab);
  Corpus dev;
  if (fs::exists(CorpusFiles{options.data_dir, "dev"}.features()))
    dev = load_split(options.data_dir, "dev", mc.vocab);
  std::optional<fs::path> alignments = options.alignments;
  if (!alignments && cfg.get_string("align.source", "ground_truth") == "file")
    alignments = fs::path(cfg.require_string("align.file"));
  if (alignments) attach_alignments(train_set, mc.topology, read_alignments(*alignments));

  TransducerModel model(mc);
  TrainReport report;
  if (options.import_checkpoint) {
    const TransducerModel source = load_checkpoint(*options.import_checkpoint);
    report.imported = import_params(model, source, options.import_prefixes);
    for (const auto& name : report.imported.imported) log << "imported\t" << name << '\n';
  }

  const bool epoch_checkpoints = cfg.get_bool("train.epoch_checkpoints", true);
  TrainHooks hooks;
  hooks.on_epoch = [&](const TransducerModel& m, const EpochMetrics& e) {
    log << "epoch " << e.epoch << "\tloss " << format_double(e.train_loss) << "\tdev error "
        << fixed(e.holdout_error) << "%\n";
    if (epoch_checkpoints) save_checkpoint(m, with_suffix(options.out_checkpoint, ".epoch" + std::to_string(e.epoch)));
  };
  report.metrics = train(model, train_set, dev, tc, hooks);
  save_checkpoint(model, options.out_checkpoint);
  std::ofstream metrics(with_suffix(options.out_checkpoint, ".metrics"), std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics next to " + options.out_checkpoint.string());
  write_metrics(metrics, report.metrics);
  return report;
}

AlignResult align_command(const AlignOptions& options, std::ostream& log) {
  const TransducerModel model = load_checkpoint(options.checkpoint);
  const Corpus corpus = load_split(options.data_dir, options.split, model.vocab());
  std::optional<AlignmentPrior> prior;
  if (options.prior) prior = AlignmentPrior{estimate_prior(model, corpus), options.prior_scale};
  AlignResult result = align_corpus(model, corpus, prior);
  write_alignments(options.out, result.records);
  log << "aligned " << result.records.size() << " sequences, " << result.unreachable.size() << " unreachable\n";
  for (const auto& id : result.unreachable) log << "unreachable\t" << id << '\n';
  return result;
}

DecodeReport decode_corpus(const TransducerModel& model, const Corpus& corpus, const DecodeConfig& decode) {
  std::optional<BpeMergeMap> merges;
  if (decode.merges) merges = read_merges(*decode.merges);
  BeamOptions opts;
  opts.beam_size = decode.beam_size;
  opts.merge = decode.merge;
  opts.ratio_cap = decode.ratio_cap;
  opts.merges = merges ? &*merges : nullptr;
  opts.vocab = &model.vocab();
  DecodeReport report;
  report.lines.resize(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    const DecodeResult r = beam_search(model, corpus[i].features, opts);
    report.lines[i] = {corpus[i].id, r.words, r.log_score};
  });
  for (const auto& line : report.lines) report.mean_log_score += *line.score;
  if (!corpus.empty()) report.mean_log_score /= static_cast<double>(corpus.size());
  return report;
}

DecodeReport decode_command(const DecodeOptions& options, std::ostream& log) {
  const TransducerModel model = load_checkpoint(options.checkpoint);
  const Corpus corpus = load_split(options.data_dir, options.split, model.vocab());
  DecodeReport report = decode_corpus(model, corpus, options.decode);
  std::ofstream out(options.out, std::ios::trunc);
  if (!out) throw IoError("cannot write " + options.out.string());
  write_transcripts(out, report.lines);
  if (!out) throw IoError("failed writing " + options.out.string());
  log << "decoded " << report.lines.size() << " sequences, beam " << options.decode.beam_size << ", merge "
      << merge_mode_name(options.decode.merge) << ", mean log score " << format_double(report.mean_log_score)
      << '\n';
  return report;
}

ScoreReport score_command(const fs::path& refs, const fs::path& hyps, std::ostream& out) {
  const ScoreReport r = error_rate(to_transcripts(read_transcripts(hyps)), to_transcripts(read_transcripts(refs)));
  out << "error rate " << fixed(r.error_rate) << "% (" << r.errors << " errors / " << r.ref_words
      << " reference tokens)\tsentences " << r.sentences << "\tsentence errors " << r.sentence_errors << '\n';
  return r;
}

std::vector<ConcatRow> concat_eval(const TransducerModel& model, const Corpus& corpus,
                                   const std::vector<int>& groups, const DecodeConfig& decode) {
  std::vector<ConcatRow> rows;
  for (int c : groups) {
    const Corpus set = concat_eval_set(corpus, c);
    ConcatRow row;
    row.group = c;
    row.sequences = set.size();
    if (!set.empty()) {
      row.min_frames = row.max_frames = static_cast<int>(set.front().features.rows());
      for (const auto& ex : set) {
        const int frames = static_cast<int>(ex.features.rows());
        row.mean_frames += frames;
        row.min_frames = std::min(row.min_frames, frames);
        row.max_frames = std::max(row.max_frames, frames);
      }
      row.mean_frames /= static_cast<double>(set.size());
    }
    const DecodeReport decoded = decode_corpus(model, set, decode);
    row.error_rate = error_rate(to_transcripts(decoded.lines), reference_words(set, model.vocab())).error_rate;
    rows.push_back(row);
  }
  return rows;
}

void write_concat_report(std::ostream& out, const std::vector<ConcatRow>& rows) {
  out << "C\tseqs\tmean_len\tmin_len\tmax_len\terror%\n";
  for (const auto& r : rows)
    out << r.group << '\t' << r.sequences << '\t' << fixed(r.mean_frames, 1) << '\t' << r.min_frames << '\t'
        << r.max_frames << '\t' << fixed(r.error_rate) << '\n';
}

// --- command line ----------------------------------------------------------------------

namespace {

void write_gradcheck(std::ostream& out, const std::vector<GradCheckEntry>& entries) {
  char buf[160];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%-26s worst %.3e  tol %.0e  checked %zu  %s\n", e.component.c_str(), e.worst,
                  e.tolerance, e.checked, e.passed() ? "ok" : "FAILED");
    out << buf;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transducer laboratory: synthetic data, training, alignment and decoding"};
  app.name("ltx");
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, checkpoint, ref_path, hyp_path;
  std::string align_split = "train", decode_split = "test", concat_split = "test";
  std::string alignments, import_path, merges_path, merge_mode;
  std::vector<std::string> prefixes;
  std::vector<int> groups{1, 2, 4};
  std::optional<int> beam;
  bool prior = false;
  double prior_scale = 1.0;
  GradCheckOptions gc;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus with ground-truth alignments");
  gen->add_option("--config", config_path, "Experiment config")->required();
  gen->add_option("--out", out_path, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model (full-sum or frame-wise CE)");
  tr->add_option("--config", config_path, "Experiment config")->required();
  tr->add_option("--data", data_dir, "Corpus directory")->required();
  tr->add_option("--out", out_path, "Output checkpoint")->required();
  tr->add_option("--alignments", alignments, "Alignment file replacing the ground truth for CE training");
  tr->add_option("--import", import_path, "Checkpoint to import parameters from");
  tr->add_option("--prefixes", prefixes, "Parameter name prefixes to import ('.' for all)")->delimiter(',');

  auto* al = app.add_subcommand("align", "Viterbi-align a corpus split with a checkpoint");
  al->add_option("--config", config_path, "Experiment config");
  al->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  al->add_option("--data", data_dir, "Corpus directory")->required();
  al->add_option("--split", align_split, "Corpus split")->capture_default_str();
  al->add_option("--out", out_path, "Output alignment file")->required();
  al->add_flag("--prior", prior, "Divide by the estimated symbol prior");
  al->add_option("--prior-scale", prior_scale, "Prior exponent")->default_val(1.0);

  auto* de = app.add_subcommand("decode", "Beam-search decode a corpus split");
  de->add_option("--config", config_path, "Experiment config");
  de->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  de->add_option("--data", data_dir, "Corpus directory")->required();
  de->add_option("--split", decode_split, "Corpus split")->capture_default_str();
  de->add_option("--out", out_path, "Output hypothesis file")->required();
  de->add_option("--beam", beam, "Beam size (default 12)");
  de->add_option("--merge", merge_mode, "Hypothesis recombination: none, sum or max");
  de->add_option("--merges", merges_path, "BPE merge file");

  auto* sc = app.add_subcommand("score", "Error rate of hypotheses against references");
  sc->add_option("--ref", ref_path, "Reference transcripts")->required();
  sc->add_option("--hyp", hyp_path, "Hypothesis transcripts")->required();

  auto* ce = app.add_subcommand("concat-eval", "Decode concatenated test sets");
  ce->add_option("--config", config_path, "Experiment config");
  ce->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  ce->add_option("--data", data_dir, "Corpus directory")->required();
  ce->add_option("--split", concat_split, "Corpus split")->capture_default_str();
  ce->add_option("--groups", groups, "Group sizes C")->delimiter(',');
  ce->add_option("--beam", beam, "Beam size (default 12)");
  ce->add_option("--merge", merge_mode, "Hypothesis recombination: none, sum or max");

  auto* gcc = app.add_subcommand("grad-check", "Finite-difference gradient suites");
  gcc->add_option("--config", config_path, "Experiment config (gradcheck.* keys)");
  gcc->add_option("--seed", gc.seed, "Instance seed");
  gcc->add_option("--lattice-instances", gc.lattice_instances, "Random lattices");
  gcc->add_option("--model-instances", gc.model_instances, "Random tiny models");
  gcc->add_flag("--inject-fault", gc.inject_fault, "Corrupt the analytic gradients (harness check)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const ConfigMap cfg = config_path.empty() ? ConfigMap{} : ConfigMap::load(config_path);
    auto decode_settings = [&] {
      DecodeConfig d = decode_config(cfg);
      if (beam) d.beam_size = *beam;
      if (!merge_mode.empty()) d.merge = parse_merge_mode(merge_mode);
      if (!merges_path.empty()) d.merges = merges_path;
      if (d.beam_size < 1) throw ConfigError("--beam must be >= 1");
      return d;
    };

    if (gen->parsed()) {
      gen_data(cfg, out_path);
      out << "wrote corpus to " << out_path << '\n';
    } else if (tr->parsed()) {
      TrainOptions o;
      o.data_dir = data_dir;
      o.out_checkpoint = out_path;
      if (!alignments.empty()) o.alignments = alignments;
      if (!import_path.empty()) {
        o.import_checkpoint = import_path;
        o.import_prefixes = prefixes.empty() ? std::vector<std::string>{"."} : prefixes;
      } else if (!prefixes.empty()) {
        throw ConfigError("--prefixes needs --import");
      }
      train_command(cfg, o, out);
    } else if (al->parsed()) {
      AlignOptions o{checkpoint, data_dir, align_split, out_path, prior, prior_scale};
      align_command(o, out);
    } else if (de->parsed()) {
      DecodeOptions o{checkpoint, data_dir, decode_split, out_path, decode_settings()};
      decode_command(o, out);
    } else if (sc->parsed()) {
      score_command(ref_path, hyp_path, out);
    } else if (ce->parsed()) {
      const TransducerModel model = load_checkpoint(checkpoint);
      const Corpus corpus = load_split(data_dir, concat_split, model.vocab());
      for (int c : groups)
        if (c < 1) throw ConfigError("--groups entries must be >= 1");
      write_concat_report(out, concat_eval(model, corpus, groups, decode_settings()));
    } else if (gcc->parsed()) {
      if (!gcc->count("--seed")) gc.seed = static_cast<std::uint64_t>(cfg.get_int("gradcheck.seed", 1));
      if (!gcc->count("--lattice-instances"))
        gc.lattice_instances = static_cast<int>(cfg.get_int("gradcheck.lattice_instances", gc.lattice_instances));
      if (!gcc->count("--model-instances"))
        gc.model_instances = static_cast<int>(cfg.get_int("gradcheck.model_instances", gc.model_instances));
      gc.eps = cfg.get_double("gradcheck.eps", gc.eps);
      const auto entries = run_gradient_suite(gc);
      write_gradcheck(out, entries);
      const bool ok = std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed(); });
      if (!ok) {
        err << "ltx: gradient check failed\n";
        return kExitNumeric;
      }
    }
  } catch (const std::exception& e) {
    err << "ltx: " << e.what() << '\n';
    return exit_code(e);
  }
  return kExitOk;
}

}  // namespace ltx::cli
