#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mmtl/model.hpp"

namespace mmtl {

struct Entity {
  int id = 0;
  std::string name;  // single vocabulary word, e.g. "ent7"
  int name_token = -1;
};

struct Relation {
  int id = 0;
  std::string name;        // single word used inside question templates
  int name_token = -1;
  std::vector<int> value_tokens;  // this relation's attribute vocabulary
};

/// (entity, relation) -> attribute. Single-constraint.
struct Fact {
  int id = 0;
  int entity = 0;
  int relation = 0;
  int value_token = -1;
};

/// (entity, year) -> award attribute. The multi-constraint family: the year
/// token is a text constraint that disambiguates between the entity's facts.
struct MultiFact {
  int id = 0;
  int entity = 0;
  int year_token = -1;
  int value_token = -1;
};

/// Question pattern as words; "[C]" marks the entity-constraint slot
/// (two tokens once expanded), "[Y]" the year slot.
struct QuestionTemplate {
  int id = 0;
  int relation = -1;  // -1 for the award family
  int group = 0;      // paraphrase group
  bool multi = false;
  std::vector<std::string> pattern;
};

struct ImageParams {
  std::string mode = "localized";  // or "distributed"
  double sigma_img = 0.05;
  int patch_grid = 4;
  int patch_dim = 16;

  int n_patches() const { return patch_grid * patch_grid; }
  /// Number of trailing patches carrying the entity signature.
  int n_signature() const {
    if (mode == "distributed") return n_patches();
    return (n_patches() + 3) / 4;  // ceil(N/4)
  }
  int first_signature_patch() const { return n_patches() - n_signature(); }
};

/// How the entity slot is rendered when building a prompt.
enum class PromptForm {
  visual,  // "this entity" + the entity's image
  named,   // "the <entity-name>", image chosen by caller (or none)
};

class World {
 public:
  /// Deterministic synthetic fact world. Every relation's attribute values
  /// are each shared by >= 2 entities, so a distractor entity with a
  /// different answer always exists. Throws on infeasible sizes
  /// (n_entities < 4 or n_relations < 1).
  static World generate(int n_entities, int n_relations, uint64_t seed);

  int vocab_size() const { return static_cast<int>(vocab.size()); }
  int eos_token() const { return 0; }
  int token(const std::string& word) const;
  const std::string& word(int tok) const;
  std::string detokenize(const std::vector<int>& toks) const;

  const Fact& fact(int id) const { return facts.at(id); }
  const Fact& fact_of(int entity, int relation) const;
  const MultiFact& multi_fact_of(int entity, int year_token) const;
  const QuestionTemplate& question_template(int id) const { return templates.at(id); }
  /// Templates of one paraphrase group (group = relation id, awards last).
  std::vector<int> group_templates(int group) const;

  /// Patch vectors (n_patches * patch_dim). Background patches are shared
  /// across entities; signature patches are keyed by entity id. sample_seed
  /// drives the per-sample noise of amplitude sigma_img.
  std::vector<double> render_image(int entity, uint64_t sample_seed) const;

  PromptSpec make_prompt(const Fact& f, const QuestionTemplate& t, uint64_t sample_seed,
                         PromptForm form = PromptForm::visual,
                         int image_entity = -2) const;  // -2: form default, -1: no image
  PromptSpec make_multi_prompt(const MultiFact& f, const QuestionTemplate& t,
                               uint64_t sample_seed,
                               PromptForm form = PromptForm::visual,
                               int image_entity = -2) const;

  /// Same fact and sample seed, next template in the paraphrase group.
  PromptSpec paraphrase(const PromptSpec& prompt) const;
  /// All other templates of the group.
  std::vector<PromptSpec> paraphrases(const PromptSpec& prompt) const;

  /// Entity with a different value for `f.relation`, chosen deterministically
  /// from `seed`. Guaranteed to exist by construction.
  int pick_distractor(const Fact& f, uint64_t seed) const;
  /// The entity's other year for the award family.
  int other_year(const MultiFact& f) const;

  std::string to_json() const;            // versioned document
  static World from_json(const std::string& text);
  void save(const std::string& path) const;
  static World load(const std::string& path);

  // --- data (kept public; the world is a value object) ---
  int version = 1;
  uint64_t seed = 0;
  std::vector<std::string> vocab;  // index = token id; [0] is "<eos>"
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<Fact> facts;              // exactly n_entities * n_relations
  std::vector<MultiFact> multi_facts;   // 2 per entity, separate family
  std::vector<QuestionTemplate> templates;
  std::vector<int> train_split;     // fact ids seen in training
  std::vector<int> eval_split;      // subset of train facts scored for early stop
  std::vector<int> longtail_split;  // fact ids held out of training entirely
  ImageParams image;

 private:
  void rebuild_indexes();
  PromptSpec expand(const QuestionTemplate& t, int entity, int year_token,
                    const std::vector<int>& answer, uint64_t sample_seed,
                    PromptForm form, int image_entity) const;

  std::map<std::string, int> word_to_token_;
  std::map<std::pair<int, int>, int> fact_index_;        // (entity, relation) -> fact id
  std::map<std::pair<int, int>, int> multi_fact_index_;  // (entity, year token) -> id
};

}  // namespace mmtl
