#pragma once

#include <string>
#include <utility>
#include <vector>

#include "discriminator.hpp"
#include "infill.hpp"

namespace seqctl {

// Per-word saliency: gradient of the offset-0 class loss for `tag` with
// respect to the sentence's input embeddings, L2-aggregated per word. The
// sentence is scored standalone by the edit-mode discriminator.
std::vector<double> saliency(const Lm& lm, const Discriminator& edit_disc,
                             const Vocabulary& vocab,
                             const std::vector<int>& sentence, int tag);

// Word positions the editor may touch, ordered by descending saliency with
// position breaking ties. Topic and entity words are dropped; date, marker,
// and function words stay.
std::vector<int> cull(const std::vector<double>& scores,
                      const std::vector<int>& sentence, const Vocabulary& vocab);

struct EditConfig {
  int rounds = 3;
  std::vector<double> mask_fractions{0.15, 0.30, 0.45};
  int candidates = 10;
  double alpha = 0.5;        // class-likelihood weight in the combined score
  double temperature = 1.0;  // infiller sampling temperature
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static EditConfig from_json(const std::string& text);
};

struct EditRecord {
  struct Candidate {
    std::vector<int> tokens;
    double class_ll = 0.0;
    double doc_ppl = 0.0;
    double combined = 0.0;
    bool qualifies = false;  // strict class-likelihood improvement
  };
  struct Round {
    double fraction = 0.0;
    std::vector<double> saliency;       // per word of the input sentence
    std::vector<int> eligible;          // culled positions, saliency descending
    std::vector<int> masked_positions;  // ascending
    std::vector<Candidate> candidates;
    int accepted = -1;  // index into candidates, -1 when none qualified
  };
  std::vector<Round> rounds;
  double before_ll = 0.0;
  double after_ll = 0.0;
  bool edited = false;
  std::string skip_reason;  // why nothing was changed, empty when edited

  std::string to_json(const Vocabulary& vocab) const;
};

// Rewrites one sentence toward its tag: up to rounds of mask-and-infill with
// growing mask fractions; per round `candidates` samples scored by standalone
// class likelihood and by perplexity of the document prefix with the
// candidate spliced in. Qualifiers must strictly beat the input's class
// likelihood; the best combined score wins; with no qualifier anywhere the
// input comes back unchanged. Total: scoring failures disqualify the
// candidate instead of throwing.
std::pair<std::vector<int>, EditRecord> edit_sentence(
    const std::vector<int>& sentence, int tag, const std::vector<int>& doc_prefix,
    const Lm& lm, const Discriminator& edit_disc, const Infiller& infiller,
    const Vocabulary& vocab, const EditConfig& config, Rng& rng);

// Edits each body sentence in order against its plan tag; document prefixes
// reflect earlier accepted edits.
std::pair<Document, std::vector<EditRecord>> edit_document(
    const Document& doc, const ControlPlan& plan, const Lm& lm,
    const Discriminator& edit_disc, const Infiller& infiller,
    const Vocabulary& vocab, const EditConfig& config);

}  // namespace seqctl
