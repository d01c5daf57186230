#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "enat/bleu.hpp"
#include "enat/config.hpp"
#include "enat/corpus.hpp"
#include "enat/inference.hpp"
#include "enat/model_io.hpp"
#include "enat/phrase_table.hpp"
#include "enat/toy_corpus.hpp"
#include "enat/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace enat;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flags shared by every subcommand; applied on top of defaults and the config file.
struct CommonOptions {
  std::string config_path;
  std::map<std::string, std::string> flags;  // config key -> raw value
  std::vector<std::string> sets;
  bool quiet = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    add(app, "--decoder-input", "decoder_input", "copy, phrase, word or embed");
    add(app, "--mu", "mu", "sentence alignment loss weight");
    add(app, "--lambda", "lambda", "adversarial loss weight");
    add(app, "--tau", "tau", "length kernel temperature");
    add(app, "--alpha", "alpha", "target/source length ratio");
    add(app, "--window-B", "window_B", "length window half-width");
    add(app, "--beam", "beam", "teacher beam size");
    add(app, "--seed", "seed", "random seed");
    add(app, "--epochs", "epochs", "training epochs");
    app->add_flag_callback("--raw-kernel", [this] { flags["raw_kernel"] = "true"; }, "unnormalized length kernel");
    app->add_option("--set", sets, "any config key as key=value (repeatable)");
    app->add_flag("--quiet", quiet, "no progress output");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : flags) cfg.set(k, v);
    cfg.validate();
    return cfg;
  }

  Logger logger() const {
    if (quiet) return {};
    return [](const std::string& line) { std::cerr << line << "\n"; };
  }

 private:
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, key](const std::string& v) { flags[key] = v; }, help);
  }
};

std::vector<std::string> read_text_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IngestionError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::ofstream open_output(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  auto os = open_output(path);
  for (const auto& l : lines) os << l << '\n';
}

PhraseTable load_table(const std::string& path) {
  return path.ends_with(".gz") || path.find("moses") != std::string::npos ? parse_moses_table(path)
                                                                          : read_native_table(path);
}

std::vector<std::size_t> parse_edges(const std::string& text) {
  std::vector<std::size_t> edges;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) edges.push_back(std::stoul(item));
  return edges;
}

json latency_json(const LatencySummary& s) {
  return {{"mode", to_string(s.mode)},
          {"sentences", s.sentences.size()},
          {"mean_wall_ms", s.mean_wall_ms},
          {"mean_decoder_passes", s.mean_decoder_passes},
          {"mean_lookup_ms", s.mean_lookup_ms},
          {"mean_rescoring_ms", s.mean_rescoring_ms},
          {"slope_ms_per_token", s.wall_vs_length.slope},
          {"slope_ci95", {s.wall_vs_length.ci_low, s.wall_vs_length.ci_high}}};
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Non-autoregressive translation with enhanced decoder inputs"};
  app.require_subcommand(1);
  std::function<void()> action;

  // gen-toy
  CommonOptions gen_common;
  ToyCorpusConfig toy;
  std::size_t valid_pairs = 200, test_pairs = 500;
  bool no_swap = false;
  std::string gen_out = ".";
  auto* gen = app.add_subcommand("gen-toy", "write a synthetic cipher corpus (train/valid/test TSV)");
  gen_common.attach(gen);
  gen->add_option("--pairs", toy.pairs, "training pairs")->capture_default_str();
  gen->add_option("--valid", valid_pairs, "validation pairs")->capture_default_str();
  gen->add_option("--test", test_pairs, "test pairs")->capture_default_str();
  gen->add_option("--min-length", toy.min_length)->capture_default_str();
  gen->add_option("--max-length", toy.max_length)->capture_default_str();
  gen->add_option("--key-seed", toy.key_seed, "seed of the cipher itself")->capture_default_str();
  gen->add_flag("--no-swap", no_swap, "disable the adjective-noun swap");
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();
  gen->callback([&] {
    action = [&] {
      const RunConfig cfg = gen_common.resolve();
      toy.seed = cfg.train.seed;
      toy.local_swap = !no_swap;
      if (toy.min_length == 0 || toy.min_length > toy.max_length) throw ConfigError("bad length range");
      const auto splits = generate_toy_splits(toy, valid_pairs, test_pairs);
      fs::create_directories(gen_out);
      write_tsv_corpus((fs::path(gen_out) / "train.tsv").string(), splits.train);
      write_tsv_corpus((fs::path(gen_out) / "valid.tsv").string(), splits.valid);
      write_tsv_corpus((fs::path(gen_out) / "test.tsv").string(), splits.test);
    };
  });

  // build-table
  CommonOptions table_common;
  std::string table_corpus, table_moses, table_out;
  auto* build = app.add_subcommand("build-table", "build a phrase table from a TSV corpus, or convert a Moses table");
  table_common.attach(build);
  build->add_option("--corpus", table_corpus, "training corpus (TSV)");
  build->add_option("--moses", table_moses, "Moses phrase table to convert (plain or .gz)");
  build->add_option("--out", table_out, "native table output")->required();
  build->callback([&] {
    action = [&] {
      const RunConfig cfg = table_common.resolve();
      if (table_corpus.empty() == table_moses.empty()) throw ConfigError("give exactly one of --corpus or --moses");
      const PhraseTable t = table_moses.empty()
                                ? build_phrase_table(read_tsv_corpus(table_corpus), cfg.max_phrase_length,
                                                     cfg.ibm1_iterations)
                                : parse_moses_table(table_moses);
      auto os = open_output(table_out);
      write_native_table(os, t);
    };
  });

  // lookup
  CommonOptions lookup_common;
  std::string lookup_table, lookup_input, lookup_output;
  auto* lookup = app.add_subcommand("lookup", "greedy phrase-table lookup, one output line per input line");
  lookup_common.attach(lookup);
  lookup->add_option("--table", lookup_table)->required();
  lookup->add_option("--input", lookup_input)->required();
  lookup->add_option("--output", lookup_output, "default: stdout");
  lookup->callback([&] {
    action = [&] {
      lookup_common.resolve();
      const PhraseTable t = load_table(lookup_table);
      std::vector<std::string> out;
      for (const auto& line : read_text_lines(lookup_input)) out.push_back(join_tokens(greedy_lookup(split_tokens(line), t)));
      if (lookup_output.empty())
        for (const auto& l : out) std::cout << l << '\n';
      else
        write_lines(lookup_output, out);
    };
  });

  // extract-word-table
  CommonOptions word_common;
  std::string word_table_in, word_table_out;
  auto* words = app.add_subcommand("extract-word-table", "single-token restriction of a phrase table");
  word_common.attach(words);
  words->add_option("--table", word_table_in)->required();
  words->add_option("--out", word_table_out)->required();
  words->callback([&] {
    action = [&] {
      word_common.resolve();
      auto os = open_output(word_table_out);
      write_native_table(os, extract_word_table(load_table(word_table_in)).as_phrase_table());
    };
  });

  // train-teacher
  CommonOptions teacher_common;
  std::string teacher_train, teacher_valid, teacher_out, teacher_log;
  auto* teach = app.add_subcommand("train-teacher", "train the autoregressive teacher");
  teacher_common.attach(teach);
  teach->add_option("--train", teacher_train)->required();
  teach->add_option("--valid", teacher_valid)->required();
  teach->add_option("--out", teacher_out, "checkpoint path")->required();
  teach->add_option("--loss-log", teacher_log, "per-step losses as JSON lines");
  teach->callback([&] {
    action = [&] {
      const RunConfig cfg = teacher_common.resolve();
      const TextCorpus train = read_tsv_corpus(teacher_train), valid = read_tsv_corpus(teacher_valid);
      const Vocabulary vocab = build_vocab(train);
      auto r = train_teacher(vocab, encode_corpus(train, vocab), encode_corpus(valid, vocab), cfg.model, cfg.train,
                             teacher_common.logger());
      save_teacher(teacher_out, r.model, vocab, cfg.train.seed);
      if (!teacher_log.empty()) {
        auto os = open_output(teacher_log);
        for (std::size_t i = 0; i < r.step_losses.size(); ++i)
          os << json{{"step", i + 1}, {"loss", r.step_losses[i]}}.dump() << '\n';
      }
    };
  });

  // distill
  CommonOptions distill_common;
  std::string distill_teacher, distill_corpus, distill_out;
  auto* dist = app.add_subcommand("distill", "replace targets by teacher beam-search translations");
  distill_common.attach(dist);
  dist->add_option("--teacher", distill_teacher)->required();
  dist->add_option("--corpus", distill_corpus)->required();
  dist->add_option("--out", distill_out, "distilled TSV corpus")->required();
  dist->callback([&] {
    action = [&] {
      const RunConfig cfg = distill_common.resolve();
      const auto teacher = load_teacher(distill_teacher);
      const TextCorpus corpus = read_tsv_corpus(distill_corpus);
      const auto d = distill(teacher.model, encode_corpus(corpus, teacher.vocab), cfg.beam);
      TextCorpus out;
      for (std::size_t i = 0; i < corpus.size(); ++i) out.push_back({corpus[i].source, teacher.vocab.decode(d.pairs[i].target)});
      write_tsv_corpus(distill_out, out);
      if (auto log = distill_common.logger())
        log("distilled " + std::to_string(out.size()) + " pairs, truncated " + std::to_string(d.truncated) +
            ", empty fallbacks " + std::to_string(d.empty_fallbacks));
    };
  });

  // train-nat
  CommonOptions nat_common;
  std::string nat_train, nat_valid, nat_table, nat_out, nat_log;
  auto* nat = app.add_subcommand("train-nat", "train the non-autoregressive student");
  nat_common.attach(nat);
  nat->add_option("--train", nat_train, "(distilled) training corpus")->required();
  nat->add_option("--valid", nat_valid)->required();
  nat->add_option("--table", nat_table, "phrase table (phrase and word inputs)");
  nat->add_option("--out", nat_out, "checkpoint path")->required();
  nat->add_option("--loss-log", nat_log, "per-step LossReport records as JSON lines");
  nat->callback([&] {
    action = [&] {
      const RunConfig cfg = nat_common.resolve();
      const TextCorpus train = read_tsv_corpus(nat_train), valid = read_tsv_corpus(nat_valid);
      const Vocabulary vocab = build_vocab(train);
      std::optional<PhraseTable> table;
      const auto method = cfg.train.method;
      if (method == DecoderInputMethod::kPhrase || method == DecoderInputMethod::kWord) {
        if (nat_table.empty()) throw ConfigurationError("--decoder-input " + to_string(method) + " needs --table");
        table = load_table(nat_table);
        if (method == DecoderInputMethod::kWord) table = extract_word_table(*table).as_phrase_table();
      }
      const double alpha = cfg.alpha ? *cfg.alpha : length_ratio_alpha(train);
      Student s = make_student(vocab, cfg.model, method, std::move(table), alpha, cfg.train.tau, cfg.train.raw_kernel,
                               cfg.train.seed);
      std::ofstream log_stream;
      if (!nat_log.empty()) log_stream = open_output(nat_log);
      LossSink sink;
      if (log_stream.is_open())
        sink = [&](const LossReport& r) {
          log_stream << json{{"step", r.step},     {"l_neg", r.l_neg}, {"l_align", r.l_align},
                             {"l_adv", r.l_adv},   {"v_word", r.v_word}, {"total", r.total}}
                            .dump()
                     << '\n';
        };
      train_nat(s, encode_corpus(train, vocab), encode_corpus(valid, vocab), cfg.train, sink, nat_common.logger());
      save_student(nat_out, s, cfg.train.seed);
    };
  });

  // translate
  CommonOptions tr_common;
  std::string tr_student, tr_teacher, tr_input, tr_output;
  auto* tr = app.add_subcommand("translate", "translate plain text, one sentence per line");
  tr_common.attach(tr);
  tr->add_option("--student", tr_student)->required();
  tr->add_option("--teacher", tr_teacher, "needed for rescoring (window-B >= 1)");
  tr->add_option("--input", tr_input)->required();
  tr->add_option("--output", tr_output, "default: stdout");
  tr->callback([&] {
    action = [&] {
      const RunConfig cfg = tr_common.resolve();
      const Student s = load_student(tr_student);
      std::optional<TeacherModel> teacher;
      if (!tr_teacher.empty()) teacher = load_teacher(tr_teacher);
      const LengthWindow window{cfg.alpha ? *cfg.alpha : s.alpha, cfg.window_b};
      std::vector<std::string> out;
      for (const auto& line : read_text_lines(tr_input)) {
        const TokenIds src = s.vocab.encode(split_tokens(line));
        if (src.empty()) {
          out.emplace_back();
          continue;
        }
        out.push_back(join_tokens(s.vocab.decode(
            nat_translate(s, src, window, teacher ? &teacher->model : nullptr).tokens)));
      }
      if (tr_output.empty())
        for (const auto& l : out) std::cout << l << '\n';
      else
        write_lines(tr_output, out);
    };
  });

  // eval
  CommonOptions ev_common;
  std::string ev_student, ev_teacher, ev_test, ev_output, ev_buckets = "5,10";
  bool ev_latency = false;
  auto* ev = app.add_subcommand("eval", "BLEU (overall and per length bucket) of a student on a TSV test set");
  ev_common.attach(ev);
  ev->add_option("--student", ev_student)->required();
  ev->add_option("--teacher", ev_teacher, "needed for rescoring (window-B >= 1)");
  ev->add_option("--test", ev_test)->required();
  ev->add_option("--buckets", ev_buckets, "comma-separated reference-length bucket edges")->capture_default_str();
  ev->add_option("--output", ev_output, "JSON summary path (default: stdout)");
  ev->add_flag("--latency", ev_latency, "also report latency (not byte-reproducible)");
  ev->callback([&] {
    action = [&] {
      const RunConfig cfg = ev_common.resolve();
      const Student s = load_student(ev_student);
      std::optional<TeacherModel> teacher;
      if (!ev_teacher.empty()) teacher = load_teacher(ev_teacher);
      const LengthWindow window{cfg.alpha ? *cfg.alpha : s.alpha, cfg.window_b};
      const TextCorpus test = read_tsv_corpus(ev_test);
      std::vector<Tokens> hyps, refs;
      std::vector<TokenIds> sources;
      for (const auto& p : test) {
        sources.push_back(s.vocab.encode(p.source));
        hyps.push_back(s.vocab.decode(nat_translate(s, sources.back(), window, teacher ? &teacher->model : nullptr).tokens));
        refs.push_back(p.target);
      }
      json summary{{"sentences", test.size()},
                   {"decoder_input", to_string(s.method)},
                   {"window_B", window.half_width},
                   {"alpha", window.alpha},
                   {"bleu", bleu(hyps, refs)}};
      json buckets = json::array();
      for (const auto& b : bleu_by_length_bucket(hyps, refs, parse_edges(ev_buckets))) {
        json row{{"lower", b.lower}, {"count", b.count}};
        row["upper"] = b.upper ? json(*b.upper) : json(nullptr);
        row["bleu"] = b.bleu ? json(*b.bleu) : json(nullptr);
        buckets.push_back(row);
      }
      summary["buckets"] = buckets;
      if (ev_latency) {
        const auto mode = window.half_width == 0 ? LatencyMode::kNatGreedy : LatencyMode::kNatRescored;
        summary["latency"] = latency_json(measure_latency(mode, sources, &s, teacher ? &teacher->model : nullptr));
      }
      if (ev_output.empty())
        std::cout << summary.dump(2) << '\n';
      else
        open_output(ev_output) << summary.dump(2) << '\n';
    };
  });

  // latency
  CommonOptions lat_common;
  std::string lat_student, lat_teacher, lat_test, lat_mode = "all", lat_output;
  std::size_t lat_warmup = 5;
  auto* lat = app.add_subcommand("latency", "per-sentence latency and decoder pass counts at batch size 1");
  lat_common.attach(lat);
  lat->add_option("--student", lat_student);
  lat->add_option("--teacher", lat_teacher);
  lat->add_option("--test", lat_test)->required();
  lat->add_option("--mode", lat_mode, "at-greedy, nat-b0, nat-b4 or all")
      ->check(CLI::IsMember({"at-greedy", "nat-b0", "nat-b4", "all"}))
      ->capture_default_str();
  lat->add_option("--warmup", lat_warmup)->capture_default_str();
  lat->add_option("--output", lat_output, "JSON path (default: stdout)");
  lat->callback([&] {
    action = [&] {
      lat_common.resolve();
      std::optional<Student> s;
      std::optional<TeacherModel> teacher;
      if (!lat_student.empty()) s = load_student(lat_student);
      if (!lat_teacher.empty()) teacher = load_teacher(lat_teacher);
      const Vocabulary& vocab = s ? s->vocab : teacher ? teacher->vocab
                                                       : throw ConfigurationError("latency needs --student or --teacher");
      std::vector<TokenIds> sources;
      for (const auto& p : read_tsv_corpus(lat_test)) sources.push_back(vocab.encode(p.source));
      json out = json::array();
      for (auto mode : {LatencyMode::kAutoregressiveGreedy, LatencyMode::kNatGreedy, LatencyMode::kNatRescored}) {
        if (lat_mode != "all" && lat_mode != to_string(mode)) continue;
        out.push_back(latency_json(measure_latency(mode, sources, s ? &*s : nullptr,
                                                   teacher ? &teacher->model : nullptr, lat_warmup)));
      }
      if (lat_output.empty())
        std::cout << out.dump(2) << '\n';
      else
        open_output(lat_output) << out.dump(2) << '\n';
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    action();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int main(int argc, char** argv) { return run(argc, argv); }
