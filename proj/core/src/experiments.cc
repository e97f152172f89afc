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


#include "capforge/experiments.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "capforge/error.h"
#include "capforge/infer.h"
#include "capforge/model.h"
#include "json.hpp"

namespace capforge::experiments {

using nlohmann::ordered_json;

// ---- synthetic sound scenes ------------------------------------------------

namespace {

std::string phrase(const Segment& s) {
  std::string level;
  if (s.level == Level::kLoud) level = "loud ";
  if (s.level == Level::kQuiet) level = "quiet ";
  switch (s.sound) {
    case Sound::kHighTone: return "a " + level + "high tone";
    case Sound::kLowTone: return "a " + level + "low tone";
    case Sound::kNoise: return level + "noise";
    case Sound::kBeeping: return level + "beeping";
    case Sound::kSilence: return "silence";
  }
  return {};
}

double amplitude(Level level) {
  switch (level) {
    case Level::kLoud: return 0.8;
    case Level::kQuiet: return 0.05;
    case Level::kNormal: break;
  }
  return 0.3;
}

}  // namespace

std::string describe(const Recipe& recipe) {
  std::string out;
  for (const auto& s : recipe.segments) {
    if (!out.empty()) out += " then ";
    out += phrase(s);
  }
  return out;
}

Recipe random_recipe(Rng& rng, const GeneratorOptions& opts) {
  if (opts.max_segments == 0 || opts.min_seconds <= 0.0 || opts.max_seconds < opts.min_seconds) {
    throw InputError("generator options are inconsistent");
  }
  Recipe r;
  const std::size_t n = 1 + static_cast<std::size_t>(rng.below(opts.max_segments));
  const double total = opts.min_seconds + (opts.max_seconds - opts.min_seconds) * rng.uniform_double();
  for (std::size_t i = 0; i < n; ++i) {
    Segment s;
    do {
      s.sound = static_cast<Sound>(rng.below(5));
    } while (!r.segments.empty() && r.segments.back().sound == s.sound);
    if (s.sound != Sound::kSilence) {
      const auto roll = rng.below(4);
      s.level = roll == 0 ? Level::kLoud : roll == 1 ? Level::kQuiet : Level::kNormal;
    }
    s.seconds = total / static_cast<double>(n);
    r.segments.push_back(s);
  }
  return r;
}

dsp::AudioClip render(const Recipe& recipe, Rng& rng) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  dsp::AudioClip clip;
  const double rate = dsp::kSampleRate;
  for (const auto& s : recipe.segments) {
    const auto count = static_cast<std::size_t>(std::llround(s.seconds * rate));
    const double amp = amplitude(s.level);
    const double phase = kTwoPi * rng.uniform_double();
    for (std::size_t i = 0; i < count; ++i) {
      const double t = static_cast<double>(i) / rate;
      double x = 0.0;
      switch (s.sound) {
        case Sound::kHighTone: x = amp * std::sin(kTwoPi * 2000.0 * t + phase); break;
        case Sound::kLowTone: x = amp * std::sin(kTwoPi * 250.0 * t + phase); break;
        case Sound::kNoise: x = amp * (2.0 * rng.uniform_double() - 1.0); break;
        case Sound::kBeeping:
          x = std::fmod(t, 0.25) < 0.125 ? amp * std::sin(kTwoPi * 1000.0 * t + phase) : 0.0;
          break;
        case Sound::kSilence: break;
      }
      clip.samples.push_back(static_cast<float>(std::clamp(x, -1.0, 1.0)));
    }
  }
  return clip;
}

std::vector<SyntheticItem> generate(std::size_t n, std::uint64_t seed, const GeneratorOptions& opts) {
  if (n == 0) throw InputError("generate: need at least one item");
  const Rng root(seed);
  std::vector<SyntheticItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    const Rng item_rng = root.split(i);
    Rng recipe_rng = item_rng.split("recipe");
    Rng audio_rng = item_rng.split("audio");
    SyntheticItem item;
    std::ostringstream name;
    name << "clip_" << std::setw(4) << std::setfill('0') << i;
    item.name = name.str();
    item.recipe = random_recipe(recipe_rng, opts);
    item.caption = describe(item.recipe);
    item.audio = render(item.recipe, audio_rng);
    items.push_back(std::move(item));
  }
  return items;
}

std::filesystem::path write_dataset(const std::vector<SyntheticItem>& items, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (const auto& item : items) {
    const auto wav = dir / (item.name + ".wav");
    dsp::write_wav_file(wav, item.audio);
    entries.push_back({wav, {item.caption}, 0});
  }
  const auto manifest = dir / "manifest.jsonl";
  write_manifest(manifest, entries);
  return manifest;
}

std::vector<std::string> toy_vocab_tokens() {
  return {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a",     "high",    "low",
          "tone",  "then",  "noise", "beep",  "loud",   "quiet", "silence", "##ing"};
}

// ---- toy decoder pretraining -----------------------------------------------

checkpoint::Checkpoint pretrain_language_model(const Vocabulary& vocab, const PretrainConfig& cfg,
                                               const std::function<void(std::size_t, double)>& on_epoch) {
  const auto cls = vocab.find("[CLS]"), sep = vocab.find("[SEP]");
  if (!cls || !sep) throw InputError("pretraining needs [CLS] and [SEP] in the vocabulary");
  if (vocab.soc_id() != static_cast<std::int32_t>(vocab.size()) - 2 ||
      vocab.eoc_id() != static_cast<std::int32_t>(vocab.size()) - 1) {
    throw InputError("pretraining expects <soc>/<eoc> as the last two vocabulary rows");
  }
  if (cfg.sentences == 0 || cfg.epochs == 0 || cfg.batch_size == 0) throw InputError("pretraining config is empty");
  ModelConfig mc = ModelConfig::from_preset(cfg.preset, vocab.size() - 2);
  mc.language_model_only = true;
  CaptionModel lm(mc);
  initialize_randomly(lm.params(), cfg.seed);

  Rng corpus_rng = Rng(cfg.seed).split("corpus");
  std::vector<TokenIds> corpus;
  for (std::size_t i = 0; i < cfg.sentences; ++i) {
    TokenIds ids = encode_caption(describe(random_recipe(corpus_rng, GeneratorOptions{})), vocab);
    ids.front() = *cls;
    ids.back() = *sep;
    corpus.push_back(std::move(ids));
  }

  trainer::Adam adam(lm.params().trainable());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const Rng epoch_rng = Rng(cfg.seed).split("pretrain").split(epoch);
    Rng shuffle_rng = epoch_rng.split("shuffle");
    Rng drop_rng = epoch_rng.split("dropout");
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0, token_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      double batch_tokens = 0.0;
      for (std::size_t i = start; i < end; ++i) batch_tokens += static_cast<double>(corpus[order[i]].size() - 1);
      lm.params().zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const TokenIds& ids = corpus[order[i]];
        const std::span<const std::int32_t> inputs(ids.data(), ids.size() - 1);
        const std::span<const std::int32_t> targets(ids.data() + 1, ids.size() - 1);
        const Tensor loss = cross_entropy(lm.decode(inputs, Tensor(), true, &drop_rng), targets);
        const double n = static_cast<double>(targets.size());
        scale(loss, static_cast<float>(n / batch_tokens)).backward();
        loss_sum += static_cast<double>(loss.item()) * n;
      }
      token_sum += batch_tokens;
      adam.step(cfg.lr);
    }
    if (on_epoch) on_epoch(epoch, loss_sum / token_sum);
  }
  ordered_json meta{{"kind", "toy-pretrained-decoder"},
                    {"model_config", ordered_json::parse(model_config_to_json(mc))},
                    {"sentences", cfg.sentences},
                    {"epochs", cfg.epochs},
                    {"seed", cfg.seed}};
  return checkpoint::from_params(lm.params(), meta.dump());
}

// ---- summaries -------------------------------------------------------------

namespace {

const std::vector<std::string>& column_names() {
  static const std::vector<std::string> names{"bleu1", "bleu2", "bleu3",  "bleu4", "rouge_l",
                                              "meteor_lite", "cider", "spice", "spider"};
  return names;
}

std::optional<double> metric_value(const metrics::MetricReport& r, const std::string& name) {
  if (name.starts_with("bleu")) return r.bleu[static_cast<std::size_t>(name[4] - '1')];
  if (name == "rouge_l") return r.rouge_l;
  if (name == "meteor_lite") return r.meteor_lite;
  if (name == "cider") return r.cider;
  if (name == "spice") return r.spice;
  if (name == "spider") return r.spider;
  return std::nullopt;
}

}  // namespace

std::vector<std::pair<std::string, MeanStd>> summarize(const std::vector<metrics::MetricReport>& runs) {
  std::vector<std::pair<std::string, MeanStd>> out;
  if (runs.empty()) return out;
  for (const auto& name : column_names()) {
    std::vector<double> xs;
    for (const auto& r : runs)
      if (auto v = metric_value(r, name)) xs.push_back(*v);
    if (xs.size() != runs.size()) continue;
    MeanStd ms;
    for (double x : xs) ms.mean += x;
    ms.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
      double ss = 0.0;
      for (double x : xs) ss += (x - ms.mean) * (x - ms.mean);
      ms.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    out.emplace_back(name, ms);
  }
  return out;
}

std::string render_table(const std::vector<std::pair<std::string, std::vector<metrics::MetricReport>>>& rows) {
  static const std::vector<std::string> headers{"BLEU_1", "BLEU_2", "BLEU_3", "BLEU_4", "ROUGE_L",
                                                "METEOR-lite", "CIDEr", "SPICE", "SPIDEr"};
  std::size_t label_w = 5;
  for (const auto& row : rows) label_w = std::max(label_w, row.first.size());
  constexpr int kCell = 14;
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(label_w) + 2) << "model";
  for (const auto& h : headers) out << std::right << std::setw(kCell) << h;
  out << "\n";
  for (const auto& [label, runs] : rows) {
    const auto summary = summarize(runs);
    out << std::left << std::setw(static_cast<int>(label_w) + 2) << label;
    for (const auto& name : column_names()) {
      auto it = std::find_if(summary.begin(), summary.end(), [&](const auto& kv) { return kv.first == name; });
      std::ostringstream cell;
      if (it == summary.end()) {
        cell << "n/a";
      } else {
        cell << std::fixed << std::setprecision(1) << it->second.mean * 100 << "+-" << it->second.std * 100;
      }
      out << std::right << std::setw(kCell) << cell.str();
    }
    out << "\n";
  }
  out << "(values x100, mean+-std over " << (rows.empty() ? 0 : rows.front().second.size())
      << " runs; METEOR-lite has no synonym stage)\n";
  return out.str();
}

// ---- ablation --------------------------------------------------------------

namespace {

std::vector<Clip> fresh_copy(const std::vector<Clip>& clips) {
  std::vector<Clip> out = clips;
  for (auto& c : out) c.features = Tensor();
  return out;
}

}  // namespace

AblationReport run_ablation(const AblationConfig& cfg, const std::filesystem::path& work_dir,
                            const std::function<void(const std::string&)>& log) {
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  if (cfg.seeds.empty()) throw InputError("ablation needs at least one seed");
  const Vocabulary vocab(toy_vocab_tokens());
  const ModelConfig mc = ModelConfig::from_preset(cfg.preset, vocab.size());

  auto make_split = [&](const char* name, std::size_t n, std::uint64_t stream) {
    const auto items = generate(n, splitmix64_finalize(cfg.data_seed + stream), cfg.audio);
    const auto manifest = write_dataset(items, work_dir / "data" / name);
    return load_dataset(manifest, vocab, mc.max_positions);
  };
  const auto train = make_split("train", cfg.train_items, 1);
  const auto val = make_split("val", cfg.val_items, 2);
  const auto test = make_split("test", cfg.test_items, 3);
  say("generated " + std::to_string(train.size()) + "/" + std::to_string(val.size()) + "/" +
      std::to_string(test.size()) + " clips");

  PretrainConfig pc = cfg.pretrain;
  pc.preset = cfg.preset;
  const auto bert = pretrain_language_model(vocab, pc, [&](std::size_t e, double loss) {
    say("pretrain epoch " + std::to_string(e) + " loss " + std::to_string(loss));
  });
  checkpoint::save_file(work_dir / "pretrained_decoder.acpt", bert);

  AblationReport report;
  std::vector<std::string> diffs;
  for (const auto seed : cfg.seeds) {
    std::map<std::string, checkpoint::AuditReport> audits;
    for (const std::string arm : {"pretrained", "random"}) {
      CaptionModel model(mc);
      const bool pre = arm == "pretrained";
      const auto policy = pre ? checkpoint::pretrained_decoder_policy(vocab.soc_id(), vocab.eoc_id(), seed)
                              : checkpoint::all_random_policy(seed);
      ArmRun run;
      run.seed = seed;
      run.audit = checkpoint::apply_init_policy(model.params(), pre ? bert : checkpoint::Checkpoint{}, policy);
      trainer::TrainConfig tc = cfg.train;
      tc.seed = seed;
      trainer::Trainer t(model, vocab, tc);
      auto tr = fresh_copy(train);
      auto va = fresh_copy(val);
      const auto result = t.fit(tr, va);
      run.best_epoch = result.best_epoch;

      metrics::Corpus corpus;
      for (const auto& clip : test) {
        const Tensor features = model.encode_eval(clip.mel);
        const auto cap = infer::caption_features(model, vocab, features, cfg.beam);
        metrics::EvalItem item{clip.key, metric_tokens(cap.text), {}};
        for (const auto& ref : clip.captions) item.references.push_back(metric_tokens(ref));
        corpus.push_back(std::move(item));
      }
      run.report = metrics::evaluate(corpus);
      say(arm + " seed " + std::to_string(seed) + ": best epoch " + std::to_string(run.best_epoch) +
          ", CIDEr " + std::to_string(run.report.cider));
      audits[arm] = run.audit;
      report.arms[arm].push_back(std::move(run));
    }
    for (const auto& e : audits["pretrained"].entries) {
      const auto* other = audits["random"].find(e.name);
      if (other == nullptr || other->status != e.status) diffs.push_back(e.name);
    }
  }
  std::sort(diffs.begin(), diffs.end());
  diffs.erase(std::unique(diffs.begin(), diffs.end()), diffs.end());
  report.init_differences = diffs;
  report.controlled = !diffs.empty() && std::all_of(diffs.begin(), diffs.end(), [](const std::string& n) {
    return n.starts_with("decoder.") && !name_matches("decoder.*.crossattn", n);
  });
  return report;
}

std::string AblationReport::table() const {
  std::vector<std::pair<std::string, std::vector<metrics::MetricReport>>> rows;
  for (const auto& [arm, runs] : arms) {
    std::vector<metrics::MetricReport> reports;
    for (const auto& r : runs) reports.push_back(r.report);
    rows.emplace_back(arm + " decoder", std::move(reports));
  }
  return render_table(rows);
}

std::string AblationReport::to_json() const {
  ordered_json j;
  ordered_json arms_json;
  for (const auto& [arm, runs] : arms) {
    ordered_json a;
    a["runs"] = ordered_json::array();
    std::vector<metrics::MetricReport> reports;
    for (const auto& r : runs) {
      a["runs"].push_back({{"seed", r.seed},
                           {"best_epoch", r.best_epoch},
                           {"metrics", ordered_json::parse(r.report.to_json())["raw"]},
                           {"init", {{"pretrained-match", r.audit.pretrained_match},
                                     {"random", r.audit.random},
                                     {"mismatch", r.audit.mismatches}}}});
      reports.push_back(r.report);
    }
    ordered_json summary;
    for (const auto& [name, ms] : summarize(reports)) summary[name] = {{"mean", ms.mean}, {"std", ms.std}};
    a["summary"] = summary;
    arms_json[arm] = a;
  }
  j["arms"] = arms_json;
  j["init_differences"] = init_differences;
  j["controlled"] = controlled;
  j["deviations"] = {"meteor_lite has no synonym stage", "spider omitted: SPICE not computed"};
  j["table"] = table();
  return j.dump(2);
}

}  // namespace capforge::experiments
