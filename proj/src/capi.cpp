#include "seqctl.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "decode.hpp"
#include "edit.hpp"
#include "infill.hpp"
#include "json.hpp"
#include "manifest.hpp"
#include "metrics.hpp"
#include "synthetic.hpp"
#include "util.hpp"

using namespace seqctl;

struct seqctl_corpus {
  Corpus c;
};
struct seqctl_lm {
  Lm lm;
};
struct seqctl_discrim {
  Discriminator d;
};
struct seqctl_infiller {
  Infiller inf;
};
struct seqctl_manifest {
  RunManifest m;
};

namespace {

thread_local std::string t_error;

seqctl_status status_of(Error::Kind k) {
  switch (k) {
    case Error::Kind::InvalidArgument: return SEQCTL_INVALID_ARGUMENT;
    case Error::Kind::Io: return SEQCTL_IO;
    case Error::Kind::Format: return SEQCTL_FORMAT;
    case Error::Kind::Incompatible: return SEQCTL_INCOMPATIBLE;
    case Error::Kind::Runtime: return SEQCTL_RUNTIME;
  }
  return SEQCTL_RUNTIME;
}

seqctl_status fail_with(const std::string& msg, seqctl_status s) {
  t_error = msg;
  return s;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Runs the body, translating exceptions into status codes.
template <typename Fn>
seqctl_status guarded(Fn&& fn) {
  try {
    fn();
    return SEQCTL_OK;
  } catch (const Error& e) {
    return fail_with(e.what(), status_of(e.kind()));
  } catch (const std::exception& e) {
    return fail_with(e.what(), SEQCTL_RUNTIME);
  }
}

seqctl_status require_arg(bool ok, const char* what) {
  if (ok) return SEQCTL_OK;
  return fail_with(std::string("null or missing argument: ") + what,
                   SEQCTL_INVALID_ARGUMENT);
}

std::string string_or_default(const char* s) { return s == nullptr ? "{}" : s; }

}  // namespace

extern "C" {

const char* seqctl_version(void) { return toolkit_version(); }

const char* seqctl_last_error(void) { return t_error.c_str(); }

void seqctl_string_free(char* s) { std::free(s); }

seqctl_status seqctl_file_hash(const char* path, char** hex_out) {
  if (auto s = require_arg(path && hex_out, "path/hex_out")) return s;
  return guarded([&] { *hex_out = dup_string(hex64(file_fingerprint(path))); });
}

seqctl_status seqctl_default_config(const char* kind, char** json_out) {
  if (auto s = require_arg(kind && json_out, "kind/json_out")) return s;
  return guarded([&] {
    const std::string k = kind;
    std::string text;
    if (k == "synthetic") text = SyntheticSpec::defaults().to_json();
    else if (k == "lm") text = LmConfig{}.to_json();
    else if (k == "discrim") text = DiscrimConfig{}.to_json();
    else if (k == "infiller") text = InfillerConfig{}.to_json();
    else if (k == "generate") text = GenerationConfig{}.to_json();
    else if (k == "edit") text = EditConfig{}.to_json();
    else fail(Error::Kind::InvalidArgument, "unknown config kind '" + k + "'");
    *json_out = dup_string(text);
  });
}

/* ---- corpus -------------------------------------------------------------- */

seqctl_status seqctl_corpus_generate(const char* spec_json, seqctl_corpus** train_out,
                                     seqctl_corpus** dev_out, seqctl_corpus** test_out) {
  if (auto s = require_arg(train_out && dev_out && test_out, "corpus outputs"))
    return s;
  return guarded([&] {
    const SyntheticSpec spec = SyntheticSpec::from_json(string_or_default(spec_json));
    SyntheticCorpus data = generate_synthetic_corpus(spec, default_schema());
    *train_out = new seqctl_corpus{std::move(data.train)};
    *dev_out = new seqctl_corpus{std::move(data.dev)};
    *test_out = new seqctl_corpus{std::move(data.test)};
  });
}

seqctl_status seqctl_corpus_load(const char* docs_path, const char* vocab_path,
                                 const char* schema_path, seqctl_corpus** out) {
  if (auto s = require_arg(docs_path && vocab_path && schema_path && out,
                           "corpus paths/out"))
    return s;
  return guarded([&] {
    *out = new seqctl_corpus{load_corpus(docs_path, vocab_path, schema_path)};
  });
}

seqctl_status seqctl_corpus_save(const seqctl_corpus* corpus, const char* docs_path,
                                 const char* vocab_path, const char* schema_path) {
  if (auto s = require_arg(corpus && docs_path, "corpus/docs_path")) return s;
  return guarded([&] {
    save_documents(corpus->c, docs_path);
    if (vocab_path != nullptr) corpus->c.vocab.save(vocab_path);
    if (schema_path != nullptr) write_file(schema_path, corpus->c.schema.to_json() + "\n");
  });
}

seqctl_status seqctl_corpus_split(const seqctl_corpus* corpus, const double* ratios,
                                  int num_ratios, uint64_t seed,
                                  seqctl_corpus** parts_out) {
  if (auto s = require_arg(corpus && ratios && parts_out && num_ratios > 0,
                           "corpus/ratios/parts_out"))
    return s;
  return guarded([&] {
    std::vector<Corpus> parts = split_corpus(
        corpus->c, std::vector<double>(ratios, ratios + num_ratios), seed);
    for (int i = 0; i < num_ratios; ++i)
      parts_out[i] = new seqctl_corpus{std::move(parts[static_cast<size_t>(i)])};
  });
}

seqctl_status seqctl_prompt_corpus(const seqctl_corpus* corpus, const char* variant,
                                   seqctl_corpus** out) {
  if (auto s = require_arg(corpus && variant && out, "corpus/variant/out")) return s;
  return guarded([&] {
    *out = new seqctl_corpus{
        build_prompt_corpus(corpus->c, prompt_variant_from_name(variant))};
  });
}

int seqctl_corpus_size(const seqctl_corpus* corpus) {
  return corpus == nullptr ? -1 : corpus->c.size();
}

void seqctl_corpus_free(seqctl_corpus* corpus) { delete corpus; }

/* ---- training ------------------------------------------------------------ */

seqctl_status seqctl_lm_train(const seqctl_corpus* train, const seqctl_corpus* dev,
                              const char* config_json, seqctl_lm** out,
                              char** report_json_out) {
  if (auto s = require_arg(train && out, "train/out")) return s;
  return guarded([&] {
    const LmConfig cfg = LmConfig::from_json(string_or_default(config_json));
    auto holder = std::make_unique<seqctl_lm>(seqctl_lm{Lm(cfg, train->c.vocab.size())});
    Lm::TrainReport rep = holder->lm.train(train->c, dev ? &dev->c : nullptr);
    if (report_json_out != nullptr) {
      nlohmann::json j;
      j["epoch_ce"] = rep.epoch_ce;
      j["dev_perplexity"] = rep.dev_perplexity;
      *report_json_out = dup_string(j.dump(2));
    }
    *out = holder.release();
  });
}

seqctl_status seqctl_lm_save(const seqctl_lm* lm, const char* path) {
  if (auto s = require_arg(lm && path, "lm/path")) return s;
  return guarded([&] { lm->lm.save(path); });
}

seqctl_status seqctl_lm_load(const char* path, seqctl_lm** out) {
  if (auto s = require_arg(path && out, "path/out")) return s;
  return guarded([&] { *out = new seqctl_lm{Lm::load(path)}; });
}

void seqctl_lm_free(seqctl_lm* lm) { delete lm; }

seqctl_status seqctl_discrim_train(const seqctl_corpus* train, const seqctl_corpus* dev,
                                   const seqctl_lm* lm, const char* config_json,
                                   seqctl_discrim** out, char** report_json_out) {
  if (auto s = require_arg(train && lm && out, "train/lm/out")) return s;
  return guarded([&] {
    const DiscrimConfig cfg = DiscrimConfig::from_json(string_or_default(config_json));
    auto holder = std::make_unique<seqctl_discrim>(seqctl_discrim{Discriminator(
        cfg, lm->lm.config().d_model, train->c.schema.num_classes())});
    Discriminator::TrainReport rep =
        holder->d.train(train->c, dev ? &dev->c : nullptr, lm->lm);
    if (report_json_out != nullptr) {
      nlohmann::json j;
      j["epoch_ce"] = rep.epoch_ce;
      j["dev_f1"] = rep.dev_f1;
      *report_json_out = dup_string(j.dump(2));
    }
    *out = holder.release();
  });
}

seqctl_status seqctl_discrim_save(const seqctl_discrim* disc, const char* path) {
  if (auto s = require_arg(disc && path, "disc/path")) return s;
  return guarded([&] { disc->d.save(path); });
}

seqctl_status seqctl_discrim_load(const char* path, seqctl_discrim** out) {
  if (auto s = require_arg(path && out, "path/out")) return s;
  return guarded([&] { *out = new seqctl_discrim{Discriminator::load(path)}; });
}

void seqctl_discrim_free(seqctl_discrim* disc) { delete disc; }

seqctl_status seqctl_infiller_train(const seqctl_corpus* train,
                                    const seqctl_corpus* dev, const char* config_json,
                                    seqctl_infiller** out, char** report_json_out) {
  if (auto s = require_arg(train && out, "train/out")) return s;
  return guarded([&] {
    const InfillerConfig cfg = InfillerConfig::from_json(string_or_default(config_json));
    auto holder = std::make_unique<seqctl_infiller>(
        seqctl_infiller{Infiller(cfg, train->c.vocab.size())});
    Infiller::TrainReport rep = holder->inf.train(train->c, dev ? &dev->c : nullptr);
    if (report_json_out != nullptr) {
      nlohmann::json j;
      j["epoch_ce"] = rep.epoch_ce;
      j["dev_ce"] = rep.dev_ce;
      *report_json_out = dup_string(j.dump(2));
    }
    *out = holder.release();
  });
}

seqctl_status seqctl_infiller_save(const seqctl_infiller* infiller, const char* path) {
  if (auto s = require_arg(infiller && path, "infiller/path")) return s;
  return guarded([&] { infiller->inf.save(path); });
}

seqctl_status seqctl_infiller_load(const char* path, seqctl_infiller** out) {
  if (auto s = require_arg(path && out, "path/out")) return s;
  return guarded([&] { *out = new seqctl_infiller{Infiller::load(path)}; });
}

void seqctl_infiller_free(seqctl_infiller* infiller) { delete infiller; }

/* ---- generation, editing, evaluation ------------------------------------- */

seqctl_status seqctl_generate(const seqctl_lm* lm, const seqctl_discrim* disc,
                              const seqctl_corpus* ref, const char* plans_path,
                              const char* config_json, const char* docs_out_path,
                              const char* traces_out_path) {
  if (auto s = require_arg(lm && ref && plans_path && docs_out_path,
                           "lm/ref/plans_path/docs_out_path"))
    return s;
  return guarded([&] {
    const GenerationConfig cfg =
        GenerationConfig::from_json(string_or_default(config_json));
    cfg.validate();
    const std::vector<ControlPlan> plans =
        load_generation_requests(plans_path, ref->c.vocab, ref->c.schema);

    Corpus out;
    out.vocab = ref->c.vocab;
    out.schema = ref->c.schema;
    std::string traces;
    for (const ControlPlan& plan : plans) {
      auto [doc, trace] =
          generate_document(plan, lm->lm, disc ? &disc->d : nullptr, ref->c.vocab, cfg);
      out.docs.push_back(std::move(doc));
      if (traces_out_path != nullptr)
        traces += nlohmann::json::parse(trace.to_json()).dump() + "\n";
    }
    save_documents(out, docs_out_path);
    if (traces_out_path != nullptr) write_file(traces_out_path, traces);
  });
}

seqctl_status seqctl_edit(const seqctl_lm* lm, const seqctl_discrim* edit_disc,
                          const seqctl_infiller* infiller, const seqctl_corpus* ref,
                          const char* docs_path, const char* config_json,
                          const char* docs_out_path, const char* records_out_path) {
  if (auto s = require_arg(lm && edit_disc && infiller && ref && docs_path &&
                               docs_out_path,
                           "lm/edit_disc/infiller/ref/docs_path/docs_out_path"))
    return s;
  return guarded([&] {
    const EditConfig base = EditConfig::from_json(string_or_default(config_json));
    base.validate();
    const std::vector<Document> docs =
        load_documents(docs_path, ref->c.vocab, ref->c.schema);

    Corpus out;
    out.vocab = ref->c.vocab;
    out.schema = ref->c.schema;
    std::string records;
    for (size_t i = 0; i < docs.size(); ++i) {
      EditConfig cfg = base;
      cfg.seed = base.seed + i;  // independent randomness per document
      auto [edited, recs] =
          edit_document(docs[i], plan_from_document(docs[i]), lm->lm, edit_disc->d,
                        infiller->inf, ref->c.vocab, cfg);
      out.docs.push_back(std::move(edited));
      if (records_out_path != nullptr) {
        nlohmann::json line;
        line["doc"] = i;
        line["records"] = nlohmann::json::array();
        for (const EditRecord& r : recs)
          line["records"].push_back(nlohmann::json::parse(r.to_json(ref->c.vocab)));
        records += line.dump() + "\n";
      }
    }
    save_documents(out, docs_out_path);
    if (records_out_path != nullptr) write_file(records_out_path, records);
  });
}

seqctl_status seqctl_eval(const seqctl_corpus* ref, const seqctl_lm* lm,
                          const seqctl_discrim* disc, const char* docs_path,
                          int with_oracle, const char* run_name,
                          const char* report_out_path, const char* csv_out_path) {
  if (auto s = require_arg(ref && docs_path && run_name && report_out_path,
                           "ref/docs_path/run_name/report_out_path"))
    return s;
  return guarded([&] {
    const std::vector<Document> docs =
        load_documents(docs_path, ref->c.vocab, ref->c.schema);
    MetricsOptions opt;
    opt.lm = lm ? &lm->lm : nullptr;
    opt.disc = disc ? &disc->d : nullptr;
    opt.reference = &ref->c;
    RuleOracle oracle(ref->c.schema, ref->c.vocab);
    if (with_oracle != 0) opt.oracle = &oracle;
    MetricsReport report = compute_metrics(docs, ref->c.vocab, opt);
    write_file(report_out_path, report.to_json() + "\n");
    if (csv_out_path != nullptr) write_file(csv_out_path, report.to_csv(run_name));
  });
}

/* ---- run manifests ------------------------------------------------------- */

seqctl_status seqctl_manifest_begin(const char* command, const char* config_json,
                                    uint64_t seed, seqctl_manifest** out) {
  if (auto s = require_arg(command && out, "command/out")) return s;
  return guarded([&] {
    *out = new seqctl_manifest{
        RunManifest::begin(command, string_or_default(config_json), seed)};
  });
}

seqctl_status seqctl_manifest_add_input(seqctl_manifest* m, const char* label,
                                        const char* path) {
  if (auto s = require_arg(m && label && path, "manifest/label/path")) return s;
  return guarded([&] { m->m.add_input(label, path); });
}

seqctl_status seqctl_manifest_add_checkpoint(seqctl_manifest* m, const char* label,
                                             const char* path) {
  if (auto s = require_arg(m && label && path, "manifest/label/path")) return s;
  return guarded([&] { m->m.add_checkpoint(label, path); });
}

seqctl_status seqctl_manifest_add_artifact(seqctl_manifest* m, const char* path) {
  if (auto s = require_arg(m && path, "manifest/path")) return s;
  return guarded([&] { m->m.add_artifact(path); });
}

seqctl_status seqctl_manifest_finish(seqctl_manifest* m, const char* path) {
  if (auto s = require_arg(m && path, "manifest/path")) return s;
  return guarded([&] { m->m.finish(path); });
}

void seqctl_manifest_free(seqctl_manifest* m) { delete m; }

}  // extern "C"
