#include "neuronscope/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "neuronscope/errors.hpp"
#include "neuronscope/rng.hpp"
#include "neuronscope/threads.hpp"

namespace neuronscope {

namespace {
/// Premise sampler: a short bigram sequence in the language's distribution
/// with at least two distinct token values (so a reordering distinct from the
/// copy always exists).
std::vector<int32_t> sample_premise(const SynthLanguageSpec& spec, Rng& rng, int len) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const Corpus burst = synthesize_corpus(spec, static_cast<size_t>(len), rng.bits());
    const std::set<int32_t> distinct(burst.tokens.begin(), burst.tokens.end());
    if (distinct.size() >= 2) return burst.tokens;
  }
  throw NumericError("could not sample a premise with 2 distinct tokens for " + spec.code);
}

std::vector<int32_t> shuffled_distinct(const std::vector<int32_t>& premise, Rng& rng) {
  std::vector<int32_t> h = premise;
  for (int attempt = 0; attempt < 256; ++attempt) {
    rng.shuffle(h);
    if (h != premise) return h;
  }
  throw NumericError("could not derange premise");
}

std::vector<int32_t> disjoint_hypothesis(const SynthLanguageSpec& spec,
                                         const std::vector<int32_t>& premise, Rng& rng,
                                         int len) {
  const std::set<int32_t> used(premise.begin(), premise.end());
  std::vector<int32_t> candidates;
  for (int32_t t = spec.private_lo; t < spec.private_hi; ++t) {
    if (used.find(t) == used.end()) candidates.push_back(t);
  }
  for (int32_t t = spec.shared_lo; t < spec.shared_hi; ++t) {
    if (used.find(t) == used.end()) candidates.push_back(t);
  }
  if (candidates.empty()) {
    throw UsageError("language '" + spec.code +
                     "' has too small a vocabulary for disjoint hypotheses");
  }
  std::vector<int32_t> h(static_cast<size_t>(len));
  for (auto& t : h) t = candidates[rng.below(candidates.size())];
  return h;
}
}  // namespace

TaskDataset gen_classification_task(const SynthLanguageSpec& spec, int n, uint64_t seed) {
  if (n < 3) throw UsageError("task generation needs n >= 3");
  spec.validate();
  Rng rng(derive_seed(seed, "task-gen", std::hash<std::string>{}(spec.code)));

  TaskDataset ds;
  ds.language = spec.code;
  ds.seed = seed;
  ds.examples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    ClassificationExample ex;
    ex.language = spec.code;
    ex.label = i % kNumClasses;  // class-balanced within +-1
    const int len = static_cast<int>(rng.range(8, 20));
    ex.premise = sample_premise(spec, rng, len);
    switch (ex.label) {
      case 0:
        ex.hypothesis = ex.premise;
        break;
      case 1:
        ex.hypothesis = disjoint_hypothesis(spec, ex.premise, rng, len);
        break;
      case 2:
        ex.hypothesis = shuffled_distinct(ex.premise, rng);
        break;
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

std::optional<int> infer_label(const ClassificationExample& ex) {
  if (ex.premise.empty() || ex.hypothesis.empty()) return std::nullopt;
  if (ex.hypothesis == ex.premise) return 0;
  const std::set<int32_t> p(ex.premise.begin(), ex.premise.end());
  bool any_shared = false;
  for (int32_t t : ex.hypothesis) {
    if (p.count(t)) {
      any_shared = true;
      break;
    }
  }
  if (!any_shared) return 1;
  std::vector<int32_t> a = ex.premise, b = ex.hypothesis;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a == b) return 2;
  return std::nullopt;
}

std::vector<int32_t> encode_example(const ClassificationExample& ex) {
  std::vector<int32_t> out;
  out.reserve(ex.premise.size() + ex.hypothesis.size() + 3);
  out.push_back(kTokBos);
  out.insert(out.end(), ex.premise.begin(), ex.premise.end());
  out.push_back(kTokSep);
  out.insert(out.end(), ex.hypothesis.begin(), ex.hypothesis.end());
  out.push_back(kTokEos);
  return out;
}

namespace {
std::vector<ParamRef> finetune_trainable(Model& model) {
  // Adapter factors plus the classification head; base weights stay frozen.
  std::vector<ParamRef> out;
  for (LoraAdapter* ad : model.all_adapters()) {
    const std::string prefix =
        "adapter." + std::to_string(ad->layer) + "." + weight_slot_name(ad->slot);
    out.push_back({prefix + ".b", &ad->b, false});
    out.push_back({prefix + ".a", &ad->a, false});
  }
  out.push_back({"cls_w", &model.cls_w, true});
  out.push_back({"cls_b", &model.cls_b, false});
  return out;
}
}  // namespace

TaskTrainResult train_task(Model& model, const TaskDataset& source, const TaskHyper& hp) {
  if (source.examples.empty()) throw UsageError("empty task dataset");
  if (hp.steps < 1) throw UsageError("steps must be >= 1");
  for (const auto& ex : source.examples) {
    if (ex.language != source.language) {
      throw UsageError("task dataset mixes languages: " + ex.language);
    }
    if (encode_example(ex).size() > static_cast<size_t>(model.config.t_max)) {
      throw UsageError("encoded example exceeds t_max");
    }
  }

  AdamWConfig opt_cfg = hp.opt;
  opt_cfg.total_steps = hp.steps;
  AdamW opt(finetune_trainable(model), opt_cfg);

  std::vector<size_t> order(source.examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  TaskTrainResult result;
  result.loss_trace.reserve(static_cast<size_t>(hp.steps));
  size_t cursor = order.size();  // trigger shuffle on first step
  uint64_t epoch = 0;

  for (int step = 0; step < hp.steps; ++step) {
    double loss = 0.0;
    GradMap grads;
    const int bsz = std::min<int>(hp.batch_size, static_cast<int>(order.size()));
    for (int b = 0; b < bsz; ++b) {
      if (cursor >= order.size()) {
        Rng rng(derive_seed(hp.seed, "task-epoch", epoch++));
        rng.shuffle(order);
        cursor = 0;
      }
      const ClassificationExample& ex = source.examples[order[cursor++]];
      loss += model.cls_loss_and_grads(encode_example(ex), ex.label, grads, nullptr,
                                       1.0 / bsz);
    }
    loss /= bsz;
    if (!std::isfinite(loss)) {
      throw NumericError("task training diverged at step " + std::to_string(step));
    }
    opt.step(grads);
    model.refresh_adapters();
    result.loss_trace.push_back(loss);
  }

  int final_correct = 0;
  for (const auto& ex : source.examples) {
    if (model.classify(encode_example(ex)) == ex.label) ++final_correct;
  }
  result.final_train_accuracy =
      static_cast<double>(final_correct) / static_cast<double>(source.examples.size());
  return result;
}

TransferResult zero_shot_eval(const Model& model, const TaskDataset& target,
                              const InterventionSpec* intervention,
                              const std::vector<LanguageCode>& train_languages, bool strict,
                              int n_threads) {
  if (strict) {
    for (const auto& lang : train_languages) {
      if (lang == target.language) {
        throw UsageError("zero-shot discipline: target language '" + target.language +
                         "' appears in the training languages");
      }
    }
  }
  std::optional<Intervention> iv;
  if (intervention) {
    if (intervention->set.language != target.language) {
      throw UsageError("intervention language '" + intervention->set.language +
                       "' does not match target language '" + target.language + "'");
    }
    iv = intervention->compile();
  }

  std::vector<int> hits(target.examples.size(), 0);
  parallel_for(target.examples.size(), n_threads, [&](size_t i) {
    const ClassificationExample& ex = target.examples[i];
    const int pred = model.classify(encode_example(ex), iv ? &*iv : nullptr);
    hits[i] = pred == ex.label ? 1 : 0;
  });
  int correct = 0;
  for (int h : hits) correct += h;

  TransferResult r;
  r.eval_language = target.language;
  r.intervention = intervention ? intervention->source.label() : "noint";
  r.n_examples = static_cast<int>(target.examples.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n_examples);
  r.seed = target.seed;
  return r;
}

}  // namespace neuronscope
