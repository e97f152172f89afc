// Copyright 2026 The capforge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include "capforge_cli/cli.h"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "capforge/bytes.h"
#include "capforge/checkpoint.h"
#include "capforge/dataset.h"
#include "capforge/dsp.h"
#include "capforge/error.h"
#include "capforge/experiments.h"
#include "capforge/infer.h"
#include "capforge/metrics.h"
#include "capforge/model.h"
#include "capforge/trainer.h"
#include "json.hpp"

namespace capforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---- config files ----------------------------------------------------------

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& key) {
  const std::string flag = "--" + key;
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.starts_with(flag + "="); });
}

// Expands `--config FILE` (flat key=value lines) into --key=value arguments
// for keys not already given as flags, so flags take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& args, const CLI::App& sub) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].starts_with("--config=")) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::istringstream in(bytes::read_text_file(path));
  std::vector<std::string> injected;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InputError(path + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key == "config") continue;
    if (sub.get_option_no_throw("--" + key) == nullptr) {
      throw InputError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "' for " + sub.get_name());
    }
    if (!given_on_command_line(args, key)) injected.push_back("--" + key + "=" + value);
  }
  std::vector<std::string> out;
  bool placed = false;
  for (const auto& a : args) {
    out.push_back(a);
    if (!placed && a == sub.get_name()) {
      out.insert(out.end(), injected.begin(), injected.end());
      placed = true;
    }
  }
  return out;
}

std::string resolved_config(const CLI::App& sub) {
  std::ostringstream o;
  o << "# capforge " << sub.get_name() << " resolved configuration\n";
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "write-config") continue;
    std::string value;
    if (!opt->results().empty()) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else if (opt->get_expected_max() == 0) {
      value = opt->count() > 0 ? "true" : "false";
    } else {
      value = opt->get_default_str();
      if (value.size() >= 2 && value.front() == '[' && value.back() == ']') value = value.substr(1, value.size() - 2);
    }
    if (opt->get_expected_max() == 0 && value.empty()) value = "true";
    if (value.empty()) continue;
    o << name << "=" << value << "\n";
  }
  return o.str();
}

// ---- shared helpers --------------------------------------------------------

Vocabulary load_vocab(const std::string& path) {
  if (path.empty()) return Vocabulary(experiments::toy_vocab_tokens());
  return Vocabulary::load(path);
}

std::size_t caption_token_limit(const ModelConfig& mc) { return mc.max_len + 2; }

struct TrainedModel {
  ModelConfig config;
  std::unique_ptr<Vocabulary> vocab;
  std::unique_ptr<CaptionModel> model;
  json metadata;
};

TrainedModel load_trained(const fs::path& path) {
  const auto ckpt = checkpoint::load_file(path);
  TrainedModel t;
  t.metadata = json::parse(ckpt.metadata_json);
  if (!t.metadata.contains("model_config") || !t.metadata.contains("vocab")) {
    throw InputError(path.string() + ": not a captioning checkpoint (metadata lacks model_config/vocab)");
  }
  t.config = model_config_from_json(t.metadata["model_config"].dump());
  t.vocab = std::make_unique<Vocabulary>(t.metadata["vocab"].get<std::vector<std::string>>());
  t.model = std::make_unique<CaptionModel>(t.config);
  checkpoint::load_into(t.model->params(), ckpt);
  return t;
}

struct AudioInput {
  std::string key;
  fs::path path;
  std::vector<std::string> captions;
};

std::vector<AudioInput> audio_inputs(const std::string& spec) {
  std::vector<AudioInput> out;
  if (spec.ends_with(".jsonl")) {
    for (const auto& e : read_manifest(spec)) out.push_back({e.audio.string(), e.audio, e.captions});
  } else {
    out.push_back({spec, spec, {}});
  }
  return out;
}

void write_or_print(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    bytes::write_text_file(path, text);
  }
}

// ---- featurize -------------------------------------------------------------

struct FeaturizeArgs {
  std::string in, out;
  std::size_t jobs = 1;
};

int cmd_featurize(const FeaturizeArgs& a, std::ostream& out, std::ostream& err) {
  struct Job {
    fs::path wav, target;
    std::vector<std::string> captions;
    std::string error;
    bool skipped = false;
  };
  std::vector<Job> jobs;
  const fs::path out_dir = a.out;
  const bool from_manifest = !fs::is_directory(a.in);
  if (from_manifest) {
    for (const auto& e : read_manifest(a.in)) jobs.push_back({e.audio, {}, e.captions, {}, false});
  } else {
    std::vector<fs::path> wavs;
    for (const auto& entry : fs::directory_iterator(a.in))
      if (entry.is_regular_file() && entry.path().extension() == ".wav") wavs.push_back(entry.path());
    std::sort(wavs.begin(), wavs.end());
    for (const auto& w : wavs) jobs.push_back({w, {}, {}, {}, false});
  }
  std::set<std::string> stems;
  for (auto& j : jobs) {
    if (!stems.insert(j.wav.stem().string()).second) {
      throw InputError("two inputs share the output name " + j.wav.stem().string() + ".mels");
    }
    j.target = out_dir / (j.wav.stem().string() + ".mels");
  }
  fs::create_directories(out_dir);

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      Job& j = jobs[i];
      if (fs::exists(j.target)) {
        j.skipped = true;
        continue;
      }
      try {
        const auto spec = dsp::log_mel(dsp::read_wav_file(j.wav));
        dsp::write_mels_file(j.target, spec);
      } catch (const std::exception& e) {
        j.error = e.what();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < std::max<std::size_t>(1, a.jobs); ++t) pool.emplace_back(worker);
    worker();
  }

  std::size_t done = 0, skipped = 0, failed = 0;
  std::vector<ManifestEntry> manifest;
  for (const auto& j : jobs) {
    if (!j.error.empty()) {
      ++failed;
      err << j.wav.string() << ": " << j.error << "\n";
      continue;
    }
    (j.skipped ? skipped : done)++;
    manifest.push_back({j.target, j.captions, 0});
  }
  if (from_manifest && !manifest.empty()) write_manifest(out_dir / "manifest.jsonl", manifest);
  out << ordered_json{{"featurized", done}, {"skipped", skipped}, {"failed", failed}}.dump() << "\n";
  return failed > 0 ? kInputError : kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string manifest, val_manifest, model = "tiny", vocab, bert_checkpoint, encoder_checkpoint;
  std::string init_policy = "auto", out;
  bool freeze_encoder = false, no_spec_augment = false;
  std::uint64_t seed = 0;
  std::size_t epochs = 30, batch_size = 32, warmup_epochs = 5, decay_period = 10;
  double decay_factor = 0.1, lr = 0.0, grad_clip = 0.0, dropout = -1.0;
  std::string select_on = "val_loss";
};

void add_train_options(CLI::App* sub, TrainArgs& a, bool require_out = true) {
  sub->add_option("--manifest", a.manifest, "training manifest (JSON lines)")->required();
  sub->add_option("--val-manifest", a.val_manifest, "validation manifest")->required();
  sub->add_option("--model", a.model, "preset: tiny|mini|medium|base|roberta_base");
  sub->add_option("--vocab", a.vocab, "vocabulary file, one token per line (default: toy vocabulary)");
  sub->add_option("--bert-checkpoint", a.bert_checkpoint, "pretrained decoder checkpoint (ACPT1)");
  sub->add_option("--encoder-checkpoint", a.encoder_checkpoint, "pretrained encoder checkpoint (ACPT1)");
  sub->add_option("--init-policy", a.init_policy, "pretrained|random|auto")
      ->check(CLI::IsMember({"pretrained", "random", "auto"}));
  sub->add_flag("--freeze-encoder", a.freeze_encoder, "keep encoder weights fixed and cache its features");
  sub->add_flag("--no-spec-augment", a.no_spec_augment, "disable SpecAugment");
  sub->add_option("--seed", a.seed, "seed (default: $CAPFORGE_SEED or 0)")->envname("CAPFORGE_SEED");
  sub->add_option("--epochs", a.epochs)->check(CLI::PositiveNumber);
  sub->add_option("--batch-size", a.batch_size)->check(CLI::PositiveNumber);
  sub->add_option("--warmup-epochs", a.warmup_epochs);
  sub->add_option("--decay-period", a.decay_period, "epochs between lr decays; 0 disables");
  sub->add_option("--decay-factor", a.decay_factor);
  sub->add_option("--lr", a.lr, "base learning rate (0: preset default)");
  sub->add_option("--grad-clip", a.grad_clip, "global gradient norm limit (0: off)");
  sub->add_option("--dropout", a.dropout, "decoder dropout (negative: preset default)");
  sub->add_option("--select-on", a.select_on, "val_loss|cider")->check(CLI::IsMember({"val_loss", "cider"}));
  auto* o = sub->add_option("--out", a.out, "output directory");
  if (require_out) o->required();
}

struct TrainOutcome {
  fs::path best_checkpoint;
  std::size_t best_epoch = 0;
};

TrainOutcome run_train(const TrainArgs& a, const std::string& resolved, std::ostream& out) {
  std::string policy_name = a.init_policy;
  if (policy_name == "auto") policy_name = a.bert_checkpoint.empty() ? "random" : "pretrained";
  if (policy_name == "pretrained" && a.bert_checkpoint.empty()) {
    throw InputError("--init-policy pretrained needs --bert-checkpoint");
  }
  if (policy_name == "random" && (!a.bert_checkpoint.empty() || !a.encoder_checkpoint.empty())) {
    throw InputError("--init-policy random contradicts the given pretrained checkpoint");
  }

  const Vocabulary vocab = load_vocab(a.vocab);
  ModelConfig mc = ModelConfig::from_preset(a.model, vocab.size());
  if (a.dropout >= 0.0) mc.dropout = a.dropout;
  auto train = load_dataset(a.manifest, vocab, caption_token_limit(mc));
  auto val = load_dataset(a.val_manifest, vocab, caption_token_limit(mc));

  CaptionModel model(mc);
  checkpoint::Checkpoint source;
  checkpoint::InitPolicy policy;
  if (policy_name == "pretrained") {
    source = checkpoint::load_file(a.bert_checkpoint);
    const bool with_encoder = !a.encoder_checkpoint.empty();
    if (with_encoder) source = checkpoint::merge(source, checkpoint::load_file(a.encoder_checkpoint));
    policy = checkpoint::pretrained_decoder_policy(vocab.soc_id(), vocab.eoc_id(), a.seed, with_encoder);
  } else {
    policy = checkpoint::all_random_policy(a.seed);
  }
  const auto audit = checkpoint::apply_init_policy(model.params(), source, policy);

  trainer::TrainConfig tc;
  tc.batch_size = a.batch_size;
  tc.epochs = a.epochs;
  tc.warmup_epochs = a.warmup_epochs;
  tc.decay_period = a.decay_period;
  tc.decay_factor = a.decay_factor;
  tc.base_lr = a.lr > 0.0 ? a.lr : default_base_lr(a.model);
  tc.seed = a.seed;
  tc.grad_clip = a.grad_clip;
  tc.spec_augment = !a.no_spec_augment;
  tc.freeze_encoder = a.freeze_encoder;
  tc.select_on = a.select_on;
  tc.validate();

  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);
  bytes::write_text_file(out_dir / "resolved_config.ini", resolved);
  const std::string audit_json = audit.to_json(policy);
  bytes::write_text_file(out_dir / "init_audit.json", audit_json + "\n");

  trainer::Trainer t(model, vocab, tc);
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::trunc);
  const auto result = t.fit(train, val, [&](const trainer::EpochRecord& r) {
    log << r.to_json() << "\n";
    log.flush();
    out << r.to_json() << "\n";
  });

  ordered_json meta;
  meta["model_config"] = ordered_json::parse(model_config_to_json(mc));
  meta["vocab"] = vocab.tokens();
  meta["best_epoch"] = result.best_epoch;
  meta["seed"] = a.seed;
  meta["init_policy"] = policy_name;
  meta["init_audit"] = ordered_json::parse(audit_json);
  auto best = result.best;
  best.metadata_json = meta.dump();
  const fs::path best_path = out_dir / "best.acpt";
  checkpoint::save_file(best_path, best);
  out << ordered_json{{"best_epoch", result.best_epoch}, {"checkpoint", best_path.string()}}.dump() << "\n";
  return {best_path, result.best_epoch};
}

// ---- caption / evaluate ----------------------------------------------------

struct CaptionArgs {
  std::string checkpoint, audio, out, model;
  std::size_t beam = 1;
  double length_alpha = 0.0;
};

std::vector<std::string> caption_lines(const CaptionArgs& a) {
  auto t = load_trained(a.checkpoint);
  if (!a.model.empty() && a.model != t.config.preset) {
    throw InputError("checkpoint holds a " + t.config.preset + " model, not " + a.model);
  }
  std::vector<std::string> lines;
  for (const auto& in : audio_inputs(a.audio)) {
    dsp::LogMelSpectrogram mel;
    try {
      mel = dsp::load_features(in.path);
    } catch (const InputError& e) {
      throw InputError(in.key + ": " + e.what());
    }
    const Tensor features = t.model->encode_eval(mel);
    const auto cap = infer::caption_features(*t.model, *t.vocab, features, a.beam, a.length_alpha);
    lines.push_back(ordered_json{{"audio", in.key}, {"caption", cap.text}, {"score", cap.score}}.dump());
  }
  return lines;
}

std::string normalized_key(const std::string& k) { return fs::path(k).lexically_normal().generic_string(); }

metrics::Corpus corpus_from_files(const std::string& predictions, const std::string& references) {
  std::vector<std::pair<std::string, std::string>> preds;
  {
    std::istringstream in(bytes::read_text_file(predictions));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      try {
        const json j = json::parse(line);
        preds.emplace_back(normalized_key(j.at("audio").get<std::string>()), j.at("caption").get<std::string>());
      } catch (const json::exception& e) {
        throw InputError(predictions + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  const auto refs = read_manifest(references);
  const std::size_t n = std::max(preds.size(), refs.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::string pk = i < preds.size() ? preds[i].first : "";
    const std::string rk = i < refs.size() ? normalized_key(refs[i].audio.string()) : "";
    if (pk != rk) {
      std::string msg = "predictions (" + std::to_string(preds.size()) + " items) and references (" +
                        std::to_string(refs.size()) + " items) diverge at item " + std::to_string(i + 1) + ": ";
      msg += rk.empty() ? "key " + pk + " is missing from the references"
                        : "key " + rk + " is missing from the predictions";
      throw InputError(msg);
    }
  }
  metrics::Corpus corpus;
  for (std::size_t i = 0; i < n; ++i) {
    metrics::EvalItem item{preds[i].first, metric_tokens(preds[i].second), {}};
    for (const auto& r : refs[i].captions) item.references.push_back(metric_tokens(r));
    if (item.references.empty()) throw InputError("references for " + preds[i].first + " are empty");
    corpus.push_back(std::move(item));
  }
  return corpus;
}

metrics::Corpus corpus_from_jsonl(const std::string& path) {
  metrics::Corpus corpus;
  std::istringstream in(bytes::read_text_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      metrics::EvalItem item;
      item.key = j.contains("key") ? j["key"].get<std::string>() : std::to_string(lineno);
      item.candidate = metric_tokens(j.at("candidate").get<std::string>());
      for (const auto& r : j.at("references")) item.references.push_back(metric_tokens(r.get<std::string>()));
      corpus.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

// ---- inspect ---------------------------------------------------------------

void inspect(const std::string& path, std::ostream& out) {
  const auto ckpt = checkpoint::load_file(path);
  const json meta = json::parse(ckpt.metadata_json);
  std::size_t scalars = 0;
  for (const auto& t : ckpt.tensors) scalars += t.values.size();
  out << path << ": ACPT1, " << ckpt.tensors.size() << " tensors, " << scalars << " values\n";
  if (meta.contains("model_config")) out << "model_config " << meta["model_config"].dump() << "\n";
  if (meta.contains("best_epoch")) out << "best_epoch " << meta["best_epoch"].dump() << "\n";
  out << "\ntensors:\n";
  for (const auto& t : ckpt.tensors) out << "  " << t.name << " " << shape_str(t.shape) << "\n";
  if (meta.contains("init_audit")) {
    const auto& audit = meta["init_audit"];
    out << "\ninit audit: " << audit["counts"].dump() << "\n";
    for (const auto& p : audit["parameters"]) {
      out << "  " << p["name"].get<std::string>() << " " << p["partition"].get<std::string>() << " "
          << p["status"].get<std::string>();
      if (p.contains("random_rows")) out << " (" << p["random_rows"].dump() << " random rows)";
      out << "\n";
    }
  } else {
    out << "\ninit audit: none recorded\n";
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"capforge: audio captioning with a CNN encoder and a BERT-style decoder"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", "capforge 0.1.0");

  std::string config_path, write_config;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key=value file; flags override it");
    sub->add_option("--write-config", write_config, "where to write the resolved configuration");
  };

  FeaturizeArgs fa;
  auto* featurize = app.add_subcommand("featurize", "WAV files to MELS1 log-mel caches");
  featurize->add_option("--in", fa.in, "directory of .wav files or a manifest")->required();
  featurize->add_option("--out", fa.out, "output directory")->required();
  featurize->add_option("--jobs", fa.jobs, "worker threads")->check(CLI::PositiveNumber);
  common(featurize);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a captioning model");
  add_train_options(train, ta);
  common(train);

  CaptionArgs ca;
  auto* caption = app.add_subcommand("caption", "caption audio with a trained checkpoint");
  caption->add_option("--checkpoint", ca.checkpoint)->required();
  caption->add_option("--audio", ca.audio, "WAV/MELS1 file or manifest (.jsonl)")->required();
  caption->add_option("--beam", ca.beam, "beam width 1..5 (1: greedy)")->check(CLI::Range(1, 5));
  caption->add_option("--length-alpha", ca.length_alpha, "rank by score / length^alpha (0: off)");
  caption->add_option("--model", ca.model, "expected preset; mismatch is an error");
  caption->add_option("--out", ca.out, "output JSON-lines file (default: stdout)");
  common(caption);

  std::string pred_path, ref_path, corpus_path, eval_out;
  std::optional<double> spice;
  auto* evaluate = app.add_subcommand("evaluate", "caption metrics report");
  evaluate->add_option("--predictions", pred_path, "caption output (JSON lines)");
  evaluate->add_option("--references", ref_path, "manifest with reference captions");
  evaluate->add_option("--corpus", corpus_path, "JSON lines {candidate, references}");
  evaluate->add_option("--spice", spice, "externally computed SPICE (enables SPIDEr)");
  evaluate->add_option("--out", eval_out, "report file (default: stdout)");
  common(evaluate);

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "list checkpoint tensors and init audit");
  inspect_cmd->add_option("--checkpoint", inspect_path)->required();
  common(inspect_cmd);

  TrainArgs ra;
  std::vector<std::uint64_t> repeat_seeds{1, 2, 3};
  std::string repeat_test;
  std::size_t repeat_beam = 1;
  auto* repeat = app.add_subcommand("repeat", "train/caption/evaluate over several seeds");
  add_train_options(repeat, ra);
  repeat->add_option("--seeds", repeat_seeds, "comma-separated seeds")->delimiter(',');
  repeat->add_option("--test-manifest", repeat_test, "evaluation manifest")->required();
  repeat->add_option("--beam", repeat_beam)->check(CLI::Range(1, 5));
  common(repeat);

  std::size_t gen_n = 8;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  experiments::GeneratorOptions gen_opts;
  auto* generate = app.add_subcommand("generate", "synthetic tone/noise dataset");
  generate->add_option("--n", gen_n)->check(CLI::PositiveNumber);
  generate->add_option("--seed", gen_seed)->envname("CAPFORGE_SEED");
  generate->add_option("--out", gen_out)->required();
  generate->add_option("--min-seconds", gen_opts.min_seconds);
  generate->add_option("--max-seconds", gen_opts.max_seconds);
  generate->add_option("--max-segments", gen_opts.max_segments);
  common(generate);

  experiments::PretrainConfig pc;
  std::string pre_vocab, pre_out;
  auto* pretrain = app.add_subcommand("pretrain", "toy causal-LM pretraining of the decoder");
  pretrain->add_option("--model", pc.preset);
  pretrain->add_option("--vocab", pre_vocab, "vocabulary file (default: toy vocabulary)");
  pretrain->add_option("--sentences", pc.sentences)->check(CLI::PositiveNumber);
  pretrain->add_option("--epochs", pc.epochs)->check(CLI::PositiveNumber);
  pretrain->add_option("--batch-size", pc.batch_size)->check(CLI::PositiveNumber);
  pretrain->add_option("--lr", pc.lr);
  pretrain->add_option("--seed", pc.seed)->envname("CAPFORGE_SEED");
  pretrain->add_option("--out", pre_out, "checkpoint path")->required();
  common(pretrain);

  experiments::AblationConfig ab;
  std::string ab_out;
  bool ab_train_encoder = false;
  double ab_lr = 0.0;
  ab.train.freeze_encoder = true;
  ab.train.epochs = 30;
  auto* ablation = app.add_subcommand("ablation", "pretrained vs random decoder initialization");
  ablation->add_option("--out", ab_out)->required();
  ablation->add_option("--model", ab.preset);
  ablation->add_option("--train-items", ab.train_items)->check(CLI::PositiveNumber);
  ablation->add_option("--val-items", ab.val_items)->check(CLI::PositiveNumber);
  ablation->add_option("--test-items", ab.test_items)->check(CLI::PositiveNumber);
  ablation->add_option("--data-seed", ab.data_seed);
  ablation->add_option("--seeds", ab.seeds)->delimiter(',');
  ablation->add_option("--beam", ab.beam)->check(CLI::Range(1, 5));
  ablation->add_option("--epochs", ab.train.epochs)->check(CLI::PositiveNumber);
  ablation->add_option("--batch-size", ab.train.batch_size)->check(CLI::PositiveNumber);
  ablation->add_option("--warmup-epochs", ab.train.warmup_epochs);
  ablation->add_option("--decay-period", ab.train.decay_period);
  ablation->add_option("--lr", ab_lr, "base learning rate (0: preset default)");
  ablation->add_flag("--train-encoder", ab_train_encoder, "train the encoder instead of freezing it");
  ablation->add_option("--pretrain-sentences", ab.pretrain.sentences);
  ablation->add_option("--pretrain-epochs", ab.pretrain.epochs);
  ablation->add_option("--min-seconds", ab.audio.min_seconds);
  ablation->add_option("--max-seconds", ab.audio.max_seconds);
  common(ablation);

  try {
    // Find the subcommand to validate config keys against.
    std::vector<std::string> expanded = args;
    for (const auto& a : args) {
      if (a.starts_with("-")) continue;
      if (auto* sub = app.get_subcommand_no_throw(a)) expanded = expand_config(args, *sub);
      break;
    }
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInputError;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kInputError;
  }

  auto resolved_for = [&](const CLI::App* sub) { return resolved_config(*sub); };
  auto save_config = [&](const CLI::App* sub, const fs::path& fallback) {
    const fs::path target = !write_config.empty() ? fs::path(write_config) : fallback;
    if (!target.empty()) bytes::write_text_file(target, resolved_for(sub));
  };

  try {
    if (featurize->parsed()) {
      save_config(featurize, fs::path(fa.out) / "resolved_config.ini");
      return cmd_featurize(fa, out, err);
    }
    if (train->parsed()) {
      run_train(ta, resolved_for(train), out);
      if (!write_config.empty()) save_config(train, {});
      return kOk;
    }
    if (caption->parsed()) {
      const auto lines = caption_lines(ca);
      std::string text;
      for (const auto& l : lines) text += l + "\n";
      write_or_print(ca.out, text, out);
      save_config(caption, ca.out.empty() ? fs::path() : fs::path(ca.out + ".config.ini"));
      return kOk;
    }
    if (evaluate->parsed()) {
      metrics::Corpus corpus;
      if (!corpus_path.empty()) {
        if (!pred_path.empty() || !ref_path.empty()) throw InputError("use either --corpus or --predictions/--references");
        corpus = corpus_from_jsonl(corpus_path);
      } else {
        if (pred_path.empty() || ref_path.empty()) throw InputError("--predictions and --references are both required");
        corpus = corpus_from_files(pred_path, ref_path);
      }
      const auto report = metrics::evaluate(corpus, spice);
      write_or_print(eval_out, report.to_json() + "\n", out);
      save_config(evaluate, eval_out.empty() ? fs::path() : fs::path(eval_out + ".config.ini"));
      return kOk;
    }
    if (inspect_cmd->parsed()) {
      inspect(inspect_path, out);
      save_config(inspect_cmd, {});
      return kOk;
    }
    if (repeat->parsed()) {
      const fs::path root = ra.out;
      save_config(repeat, root / "resolved_config.ini");
      std::vector<metrics::MetricReport> reports;
      ordered_json runs = ordered_json::array();
      for (const auto seed : repeat_seeds) {
        TrainArgs one = ra;
        one.seed = seed;
        one.out = (root / ("seed_" + std::to_string(seed))).string();
        const auto outcome = run_train(one, resolved_for(repeat), out);
        CaptionArgs c{outcome.best_checkpoint.string(), repeat_test, "", "", repeat_beam, 0.0};
        std::string text;
        for (const auto& l : caption_lines(c)) text += l + "\n";
        const fs::path pred = fs::path(one.out) / "test_captions.jsonl";
        bytes::write_text_file(pred, text);
        reports.push_back(metrics::evaluate(corpus_from_files(pred.string(), repeat_test)));
        bytes::write_text_file(fs::path(one.out) / "test_metrics.json", reports.back().to_json() + "\n");
        runs.push_back({{"seed", seed}, {"best_epoch", outcome.best_epoch}});
      }
      const std::string table = experiments::render_table({{ra.model, reports}});
      ordered_json summary;
      for (const auto& [name, ms] : experiments::summarize(reports)) summary[name] = {{"mean", ms.mean}, {"std", ms.std}};
      bytes::write_text_file(root / "repeat_report.json",
                             ordered_json{{"runs", runs}, {"summary", summary}, {"table", table}}.dump(2) + "\n");
      out << table;
      return kOk;
    }
    if (generate->parsed()) {
      const auto items = experiments::generate(gen_n, gen_seed, gen_opts);
      const auto manifest = experiments::write_dataset(items, gen_out);
      Vocabulary(experiments::toy_vocab_tokens()).save(fs::path(gen_out) / "vocab.txt");
      save_config(generate, fs::path(gen_out) / "resolved_config.ini");
      out << ordered_json{{"items", items.size()}, {"manifest", manifest.string()}}.dump() << "\n";
      return kOk;
    }
    if (pretrain->parsed()) {
      const Vocabulary vocab = load_vocab(pre_vocab);
      const auto ckpt = experiments::pretrain_language_model(vocab, pc, [&](std::size_t e, double loss) {
        out << ordered_json{{"epoch", e}, {"loss", loss}}.dump() << "\n";
      });
      checkpoint::save_file(pre_out, ckpt);
      save_config(pretrain, fs::path(pre_out + ".config.ini"));
      return kOk;
    }
    if (ablation->parsed()) {
      ab.train.freeze_encoder = !ab_train_encoder;
      ab.train.base_lr = ab_lr > 0.0 ? ab_lr : default_base_lr(ab.preset);
      const fs::path root = ab_out;
      save_config(ablation, root / "resolved_config.ini");
      const auto report = experiments::run_ablation(ab, root, [&](const std::string& s) { out << s << "\n"; });
      bytes::write_text_file(root / "ablation_report.json", report.to_json() + "\n");
      bytes::write_text_file(root / "ablation_table.txt", report.table());
      out << report.table();
      out << "controlled: " << (report.controlled ? "yes" : "no") << " (" << report.init_differences.size()
          << " tensors differ in provenance)\n";
      return kOk;
    }
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const InvariantError& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternalError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternalError;
  }
  return kInputError;
}

}  // namespace capforge::cli
