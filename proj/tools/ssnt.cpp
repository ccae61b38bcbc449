// Command-line front end: gen-data, train, synth, align, check, eval.
// Exit codes: 0 success, 1 I/O or runtime error, 2 configuration error,
// 3 self-check failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ssnt/check.hpp"
#include "ssnt/config.hpp"
#include "ssnt/eval.hpp"

namespace {

using namespace ssnt;

constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitCheck = 3;

struct GenDataArgs {
  std::string config, out;
};

struct TrainArgs {
  std::string config, data, out, resume;
};

struct SynthArgs {
  std::string ckpt, text, transcripts, out, config, mode = "greedy";
  std::uint64_t seed = 0;
  std::optional<std::size_t> max_groups;
};

struct AlignArgs {
  std::string ckpt, data, ids, out;
  bool pgm = false;
};

struct CheckArgs {
  std::string level = "quick";
};

struct EvalArgs {
  std::string ckpt, data, split = "test", config;
  std::size_t threads = 1;
};

std::string summary(const CorpusStats& s) {
  return std::to_string(s.utterances) + " utterances, " + std::to_string(s.frames) + " frames, mean I " +
         format_double(s.mean_I) + ", mean J " + format_double(s.mean_J);
}

int cmd_gen_data(const GenDataArgs& a) {
  const RunConfig rc = load_run_config(a.config);
  require_corpus_keys(rc);
  rc.data.validate();
  const Corpus corpus = generate_corpus(rc.data);
  write_corpus(corpus, a.out);
  std::cout << "wrote " << a.out << "\n";
  std::cout << "train: " << summary(corpus_stats({&corpus.train})) << "\n";
  std::cout << "val: " << summary(corpus_stats({&corpus.val})) << "\n";
  std::cout << "test: " << summary(corpus_stats({&corpus.test})) << "\n";
  std::cout << "total: " << summary(corpus_stats({&corpus.train, &corpus.val, &corpus.test})) << "\n";
  return 0;
}

std::size_t feature_dim_of(const std::vector<Utterance>& utts) {
  if (utts.empty()) throw IoError("training split is empty");
  const std::size_t D = utts.front().features.cols();
  for (const auto& u : utts)
    if (u.features.cols() != D) throw IoError("utterance '" + u.id + "' has inconsistent feature dimension");
  return D;
}

int cmd_train(const TrainArgs& a) {
  const RunConfig rc = load_run_config(a.config);
  rc.train.validate();
  const fs::path data(a.data);
  const Vocabulary vocab = read_vocab(data / "vocab.txt");
  const auto train = load_split(data, "train", vocab);
  const std::vector<Utterance> val =
      fs::exists(data / "val" / "transcripts.tsv") ? load_split(data, "val", vocab) : std::vector<Utterance>{};
  const ModelConfig mcfg = resolve_model_config(rc, vocab, feature_dim_of(train));

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  TrainOptions opts;
  opts.out_dir = a.out;
  opts.log = &std::cout;
  opts.resume = resume ? &*resume : nullptr;
  opts.vocab = vocab;
  fs::create_directories(opts.out_dir);
  const TrainResult r = train_loop(mcfg, rc.train, train, val, opts);

  std::cout << "trained to step " << r.model.step;
  if (!r.metrics.empty()) {
    const MetricRow& last = r.metrics.back();
    std::cout << ", train_nll " << format_double(last.train_nll);
    if (!std::isnan(last.val_nll)) std::cout << ", val_nll " << format_double(last.val_nll);
  }
  std::cout << "\n";
  if (!r.skipped.empty()) std::cout << "skipped " << r.skipped.size() << " utterances\n";
  std::cout << "checkpoint: " << (opts.out_dir / ("ckpt_" + std::to_string(r.model.step) + ".bin")).string() << "\n";
  return 0;
}

DecodeConfig decode_config(const std::string& config_path) {
  return config_path.empty() ? DecodeConfig{} : load_run_config(config_path).decode;
}

int cmd_synth(const SynthArgs& a) {
  DecodeConfig d = decode_config(a.config);
  if (!field_from_string(a.mode, d.mode)) throw ConfigError("unknown mode '" + a.mode + "'");
  d.seed = a.seed;
  if (a.max_groups) d.max_groups = *a.max_groups;
  const ModelBundle m = load_model(a.ckpt);

  std::vector<TranscriptEntry> items;
  if (!a.transcripts.empty()) {
    items = read_transcripts(a.transcripts, m.vocab);
  } else {
    items.push_back({"text", tokens_to_ids(m.vocab, a.text)});
    if (items.back().symbols.empty()) throw ConfigError("--text has no tokens");
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  std::size_t terminated = 0, groups = 0;
  for (const auto& item : items) {
    const DecodeResult r = synthesize(m.config, m.params, item.symbols, d);
    write_features(r.y_hat, out / (item.id + ".csv"));
    export_alignment(r, out / (item.id + ".align.csv"));
    terminated += r.terminated;
    groups += r.alignment.z.size();
    if (!r.terminated) {
      std::cerr << "warning: '" << item.id << "' did not reach the last input position within "
                << d.limit(item.symbols.size()) << " groups\n";
    }
  }
  std::cout << "synthesized " << items.size() << " utterances, terminated " << terminated << "/" << items.size()
            << ", mean groups " << format_double(static_cast<double>(groups) / items.size()) << "\n";
  return 0;
}

std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t end = std::min(s.find(',', pos), s.size());
    if (end > pos) out.push_back(s.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

int cmd_align(const AlignArgs& a) {
  const ModelBundle m = load_model(a.ckpt);
  const fs::path data(a.data), out(a.out);
  std::vector<Utterance> all;
  for (const char* split : {"train", "val", "test"}) {
    if (!fs::exists(data / split / "transcripts.tsv")) continue;
    for (auto& u : load_split(data, split, m.vocab)) all.push_back(std::move(u));
  }
  const auto ids = split_ids(a.ids);
  if (ids.empty()) throw ConfigError("--ids is empty");
  std::vector<const Utterance*> chosen;
  for (const auto& id : ids) {
    auto it = std::find_if(all.begin(), all.end(), [&](const Utterance& u) { return u.id == id; });
    if (it == all.end()) throw ConfigError("unknown utterance id '" + id + "'");
    chosen.push_back(&*it);
  }
  fs::create_directories(out);
  for (const Utterance* u : chosen) {
    const AlignmentAnalysis an = analyze_alignment(m.config, m.params, u->symbols, u->features);
    write_text_file(out / (u->id + ".gamma.csv"), gamma_csv(an.gamma));
    write_text_file(out / (u->id + ".path.csv"), best_path_csv(an.best));
    if (a.pgm) write_text_file(out / (u->id + ".pgm"), gamma_pgm(an.gamma));
    std::cout << u->id << ": log-likelihood " << format_double(an.log_likelihood);
    if (!u->frame_symbol.empty()) {
      const std::size_t hits = boundaries_within(an.best_frames, u->frame_symbol, 2);
      std::cout << ", boundaries within 2 frames " << hits << "/" << u->symbols.size() - 1;
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_check(const CheckArgs& a) {
  const auto results = run_checks(a.level == "full" ? CheckLevel::kFull : CheckLevel::kQuick);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%s %-9s %7.2f s  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    ok &= r.passed;
  }
  return ok ? 0 : kExitCheck;
}

int cmd_eval(const EvalArgs& a) {
  const ModelBundle m = load_model(a.ckpt);
  const fs::path data(a.data);
  const auto utts = load_split(data, a.split, m.vocab);
  for (const auto& u : utts)
    if (u.frame_symbol.empty()) throw IoError("utterance '" + u.id + "' has no reference alignment");
  const Tensor prototypes = read_features(data / "prototypes.csv");
  if (prototypes.rows() != m.vocab.size() || prototypes.cols() != m.config.feature_dim) {
    throw IoError("prototypes.csv does not match the checkpoint's vocabulary and feature dimension");
  }
  EvalOptions opt;
  opt.threads = a.threads;
  opt.decode = decode_config(a.config);
  const EvalReport rep = evaluate(m.config, m.params, m.vocab, prototypes, utts, opt);
  std::cout << "split: " << a.split << "\n" << format_report(rep);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segment-to-segment neural transduction for continuous output sequences"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  g->add_option("--config", gen.config, "Run configuration (INI)")->required();
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model on a corpus");
  t->add_option("--config", train.config, "Run configuration (INI)")->required();
  t->add_option("--data", train.data, "Corpus directory")->required();
  t->add_option("--out", train.out, "Output directory for checkpoints and metrics")->required();
  t->add_option("--resume", train.resume, "Checkpoint to continue from");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Decode feature sequences from text");
  s->add_option("--ckpt", synth.ckpt, "Checkpoint")->required();
  auto* text = s->add_option("--text", synth.text, "Space-separated tokens");
  auto* trans = s->add_option("--transcripts", synth.transcripts, "Transcript file (id<TAB>tokens)");
  text->excludes(trans);
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--mode", synth.mode, "greedy or sample")->check(CLI::IsMember({"greedy", "sample"}));
  s->add_option("--seed", synth.seed, "Sampling seed");
  s->add_option("--max-groups", synth.max_groups, "Decoder step limit");
  s->add_option("--config", synth.config, "Run configuration supplying [decode] defaults");

  AlignArgs align;
  auto* al = app.add_subcommand("align", "Teacher-forced alignment posteriors and best paths");
  al->add_option("--ckpt", align.ckpt, "Checkpoint")->required();
  al->add_option("--data", align.data, "Corpus directory")->required();
  al->add_option("--ids", align.ids, "Comma-separated utterance ids")->required();
  al->add_option("--out", align.out, "Output directory")->required();
  al->add_flag("--pgm", align.pgm, "Also write a PGM heatmap per utterance");

  CheckArgs check;
  auto* c = app.add_subcommand("check", "Run built-in self-tests");
  c->add_option("--level", check.level, "quick or full")->check(CLI::IsMember({"quick", "full"}));

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus split");
  e->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
  e->add_option("--data", eval.data, "Corpus directory")->required();
  e->add_option("--split", eval.split, "Split name");
  e->add_option("--config", eval.config, "Run configuration supplying [decode] settings");
  e->add_option("--threads", eval.threads, "Worker threads (0 = hardware)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitConfig;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(train);
    if (*s) {
      if (synth.text.empty() && synth.transcripts.empty()) throw ConfigError("synth needs --text or --transcripts");
      return cmd_synth(synth);
    }
    if (*al) return cmd_align(align);
    if (*c) return cmd_check(check);
    if (*e) return cmd_eval(eval);
  } catch (const ConfigError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitIo;
  }
  return 0;
}
