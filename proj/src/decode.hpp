#pragma once

#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "discriminator.hpp"

namespace seqctl {

enum class Method { Naive, Prompt, Dpc, Hsc };
const char* method_name(Method m);
Method method_from_name(const std::string& name);

// How the class likelihood and the naive LM term combine per candidate:
// Log mixes the log scores, Linear mixes the probabilities.
enum class FusionSpace { Log, Linear };

// Prompt sections shown before each sentence: the current label only, all
// labels up to the current sentence, or every label plus a position marker.
enum class PromptVariant { Local, Past, Full };
const char* prompt_variant_name(PromptVariant v);
PromptVariant prompt_variant_from_name(const std::string& name);

struct GenerationConfig {
  Method method = Method::Dpc;
  StructuralMode mode;
  double gamma = 0.5;           // weight of the class term, in [0, 1]
  int top_k = 200;              // candidate pool for rescoring
  double temperature = 1.0;
  int max_sentence_tokens = 60;
  int hsc_steps = 10;           // gradient-ascent steps on the hidden states
  double hsc_step_size = 0.02;  // each step moves step_size along the unit gradient
  int hsc_horizon = 30;         // trailing positions eligible for perturbation
  // Reuse the current sentence's first perturbation for its later tokens
  // instead of re-running the ascent per token. Logits read only the newest
  // hidden row, which carries no stored delta, so reuse drifts toward the
  // naive distribution as the sentence grows; recomputing is the default.
  bool hsc_reuse = false;
  FusionSpace fusion = FusionSpace::Log;
  bool greedy = false;  // argmax instead of sampling; ties go to the lowest id
  bool edit = false;    // request a post-generation edit pass (pipeline level)
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static GenerationConfig from_json(const std::string& text);
};

// Per-token and per-sentence decoding record. Positions index the token
// stream the sentence was decoded in; prompting rebuilds that stream before
// every sentence, so its positions restart accordingly.
struct DecodeTrace {
  struct TokenRow {
    int position = 0;  // stream index the emitted token occupies
    int k = 0;         // 1-based sentence index
    int candidates = 0;
    double naive_lp = 0.0;  // log-prob under the unperturbed model, full vocab
    double class_ll = 0.0;  // meaningful only when has_class
    double fused = 0.0;     // log score the token was chosen by
    int chosen = -1;
    double rng_draw = std::numeric_limits<double>::quiet_NaN();  // NaN if greedy
    bool has_class = false;
    bool hsc_fallback = false;  // non-finite gradient; decoded from plain logits
  };
  struct SentenceEnd {
    int k = 0;
    int tokens = 0;
    bool budget_hit = false;  // true when the per-sentence budget forced the cut
  };
  std::vector<TokenRow> tokens;
  std::vector<SentenceEnd> sentences;

  std::string to_json() const;
};

struct StepResult {
  int token = -1;
  DecodeTrace::TokenRow row;
};

// Per-candidate scores for one rescoring step; prob is the sampling
// distribution softmax(fused / temperature) over the candidate set. class_ll
// is empty when the class term is off (gamma == 0 or no discriminator).
struct StepDistribution {
  std::vector<int> ids;  // ascending token ids
  std::vector<double> naive_lp;
  std::vector<double> class_ll;
  std::vector<double> fused;
  std::vector<double> prob;
};
StepDistribution dpc_distribution(const Lm& lm, const Discriminator* disc,
                                  const Vocabulary& vocab,
                                  const std::vector<int>& context,
                                  const ControlPlan& plan, int k,
                                  const GenerationConfig& config);

// One candidate-rescoring step. The context must end inside sentence k (its
// in-progress span may be empty). Takes the top_k candidates by naive
// log-probability, scores each under the discriminator with the candidate
// appended, fuses per config, and samples. <eos> is excluded while the
// current sentence is empty.
StepResult dpc_step(const Lm& lm, const Discriminator& disc, const Vocabulary& vocab,
                    const std::vector<int>& context, const ControlPlan& plan, int k,
                    const GenerationConfig& config, Rng& rng);

// One hidden-state perturbation step: gradient ascent on the class
// log-likelihood over the trailing hsc_horizon hidden rows, then sampling
// from the softmax of gamma * perturbed + (1 - gamma) * plain logits.
StepResult hsc_step(const Lm& lm, const Discriminator& disc, const Vocabulary& vocab,
                    const std::vector<int>& context, const ControlPlan& plan, int k,
                    const GenerationConfig& config, Rng& rng);

// Decodes exactly plan.length() sentences. The discriminator may be null for
// method Naive; method Prompt treats `lm` as the prompt-conditioned model and
// maps mode.kind to the prompt variant. Deterministic given config.seed.
std::pair<Document, DecodeTrace> generate_document(const ControlPlan& plan, const Lm& lm,
                                                   const Discriminator* disc,
                                                   const Vocabulary& vocab,
                                                   const GenerationConfig& config);

// Class-blind sampling from the language model alone; equivalent to Dpc with
// gamma = 0 and the candidate pool spanning the whole vocabulary.
Document naive_generate(const ControlPlan& plan, const Lm& lm, const Vocabulary& vocab,
                        const GenerationConfig& config);

// ---------------------------------------------------------------------------
// Prompting baseline
//
// Documents are serialized as
//   <hl> headline <lb> <c..> [<c..> ...] [<p..>] <tx> sentences...
// with labels and the position marker drawn from reserved vocabulary tokens.
// The serialized prompt occupies the headline slot of a pseudo-document, so
// the flattened stream is <bos> prompt <eos> sent_1 <eos> ...
// ---------------------------------------------------------------------------

// Prompt token sequence shown before sentence k (1-based). Errors when the
// vocabulary lacks the reserved serialization tokens.
std::vector<int> render_prompt(const ControlPlan& plan, int k, PromptVariant v,
                               const Vocabulary& vocab);

struct ParsedPrompt {
  std::vector<int> headline;
  std::vector<int> labels;
  int position = 0;  // 1-based marker when present, else 0
};
ParsedPrompt parse_prompt(const std::vector<int>& prompt, const Vocabulary& vocab);

// Serialized corpus for training the prompt-conditioned model: one
// pseudo-document per (document, sentence) pair, holding the prompt for that
// sentence and the body up through it.
Corpus build_prompt_corpus(const Corpus& corpus, PromptVariant v);

// Rebuilds the prompt before every sentence and samples from the prompt-
// conditioned model without any class term. A serialization that exceeds the
// model context is an error.
std::pair<Document, DecodeTrace> prompt_generate(const ControlPlan& plan,
                                                 const Lm& prompt_lm, PromptVariant v,
                                                 const Vocabulary& vocab,
                                                 const GenerationConfig& config);

// JSONL requests, one {"headline": str, "tags": [str, ...]} object per line.
std::vector<ControlPlan> load_generation_requests(const std::string& path,
                                                  const Vocabulary& vocab,
                                                  const DiscourseSchema& schema);

}  // namespace seqctl
