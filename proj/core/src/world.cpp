#include "mmtl/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

#include <nlohmann/json.hpp>

#include "mmtl/fsio.hpp"
#include "mmtl/rng.hpp"

namespace mmtl {

using ordered_json = nlohmann::ordered_json;

namespace {

const char* kRelationNames[] = {"capital",  "founder", "color", "sport",  "language",
                                "anthem",   "district", "motto", "currency", "mascot"};

std::vector<std::vector<std::string>> single_patterns(const std::string& rel) {
  return {
      {"what", "is", "the", rel, "of", "[C]", "?"},
      {"tell", "me", "the", rel, "of", "[C]"},
      {"the", rel, "of", "[C]", "is"},
      {"name", "the", rel, "of", "[C]"},
  };
}

std::vector<std::vector<std::string>> award_patterns() {
  return {
      {"which", "award", "did", "[C]", "win", "in", "[Y]", "?"},
      {"what", "award", "went", "to", "[C]", "in", "[Y]", "?"},
      {"name", "the", "award", "[C]", "won", "in", "[Y]"},
      {"in", "[Y]", "what", "award", "did", "[C]", "get", "?"},
  };
}

}  // namespace

World World::generate(int n_entities, int n_relations, uint64_t seed) {
  // Each relation's values must each cover >= 2 entities while still leaving
  // >= 2 distinct values (so a distractor with a different answer exists).
  if (n_entities < 4 || n_relations < 1)
    throw std::invalid_argument("gen_world: infeasible sizes (need n_entities >= 4, "
                                "n_relations >= 1)");

  World w;
  w.seed = seed;

  auto add_word = [&](const std::string& word) {
    auto it = w.word_to_token_.find(word);
    if (it != w.word_to_token_.end()) return it->second;
    int id = static_cast<int>(w.vocab.size());
    w.vocab.push_back(word);
    w.word_to_token_[word] = id;
    return id;
  };
  add_word("<eos>");

  // Relations and their question templates. Template words enter the
  // vocabulary in pattern order so token ids are stable and readable.
  for (int r = 0; r < n_relations; ++r) {
    Relation rel;
    rel.id = r;
    rel.name = r < 10 ? kRelationNames[r] : "rel" + std::to_string(r);
    rel.name_token = add_word(rel.name);
    w.relations.push_back(rel);
  }
  int next_template = 0;
  for (int r = 0; r < n_relations; ++r) {
    for (auto& pat : single_patterns(w.relations[r].name)) {
      QuestionTemplate t;
      t.id = next_template++;
      t.relation = r;
      t.group = r;
      t.pattern = pat;
      for (const auto& word : pat)
        if (word != "[C]" && word != "[Y]") add_word(word);
      w.templates.push_back(std::move(t));
    }
  }
  for (auto& pat : award_patterns()) {
    QuestionTemplate t;
    t.id = next_template++;
    t.relation = -1;
    t.group = n_relations;
    t.multi = true;
    t.pattern = pat;
    for (const auto& word : pat)
      if (word != "[C]" && word != "[Y]") add_word(word);
    w.templates.push_back(std::move(t));
  }
  // Constraint-slot fillers.
  add_word("this");
  add_word("entity");
  add_word("the");

  for (int e = 0; e < n_entities; ++e) {
    Entity ent;
    ent.id = e;
    ent.name = "ent" + std::to_string(e);
    ent.name_token = add_word(ent.name);
    w.entities.push_back(ent);
  }

  // Single-constraint facts: per relation, shuffle entities and give each
  // consecutive pair one shared attribute value (a trailing triple when the
  // entity count is odd).
  std::vector<std::vector<int>> value_of(n_relations, std::vector<int>(n_entities, -1));
  for (int r = 0; r < n_relations; ++r) {
    int n_values = n_entities / 2;
    for (int k = 0; k < n_values; ++k) {
      int tok = add_word(w.relations[r].name + std::to_string(k));
      w.relations[r].value_tokens.push_back(tok);
    }
    std::vector<int> order(n_entities);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, 101, static_cast<uint64_t>(r)));
    rng.shuffle(order);
    for (int i = 0; i < n_entities; ++i) {
      int k = std::min(i / 2, n_values - 1);
      value_of[r][order[i]] = w.relations[r].value_tokens[k];
    }
  }
  for (int e = 0; e < n_entities; ++e) {
    for (int r = 0; r < n_relations; ++r) {
      Fact f;
      f.id = static_cast<int>(w.facts.size());
      f.entity = e;
      f.relation = r;
      f.value_token = value_of[r][e];
      w.facts.push_back(f);
    }
  }

  // Award family: two years per entity with different award values, so
  // swapping the year inside a question changes the true answer.
  int n_awards = std::max(2, n_entities / 2);
  std::vector<int> award_tokens;
  for (int k = 0; k < n_awards; ++k) award_tokens.push_back(add_word("award" + std::to_string(k)));
  Rng award_rng(mix_seed(seed, 102));
  for (int e = 0; e < n_entities; ++e) {
    int y1 = 1980 + static_cast<int>(award_rng.below(30));
    int y2 = y1;
    while (y2 == y1) y2 = 1980 + static_cast<int>(award_rng.below(30));
    int v1 = award_tokens[award_rng.below(award_tokens.size())];
    int v2 = v1;
    while (v2 == v1) v2 = award_tokens[award_rng.below(award_tokens.size())];
    for (auto [year, val] : {std::pair{y1, v1}, std::pair{y2, v2}}) {
      MultiFact mf;
      mf.id = static_cast<int>(w.multi_facts.size());
      mf.entity = e;
      mf.year_token = add_word(std::to_string(year));
      mf.value_token = val;
      w.multi_facts.push_back(mf);
    }
  }

  // Longtail: ~10% of facts held out of training, at most one per entity so
  // every entity still has trained facts (insertion edits need a known
  // entity with an unknown fact).
  int n_longtail = static_cast<int>(std::lround(0.10 * static_cast<double>(w.facts.size())));
  n_longtail = std::min(n_longtail, n_entities);
  std::vector<int> ent_order(n_entities);
  std::iota(ent_order.begin(), ent_order.end(), 0);
  Rng split_rng(mix_seed(seed, 202));
  split_rng.shuffle(ent_order);
  std::vector<bool> is_longtail(w.facts.size(), false);
  for (int i = 0; i < n_longtail; ++i) {
    int e = ent_order[i];
    int r = static_cast<int>(split_rng.below(static_cast<uint64_t>(n_relations)));
    int fid = e * n_relations + r;
    is_longtail[fid] = true;
    w.longtail_split.push_back(fid);
  }
  std::sort(w.longtail_split.begin(), w.longtail_split.end());
  for (const Fact& f : w.facts)
    if (!is_longtail[f.id]) w.train_split.push_back(f.id);

  std::vector<int> eval = w.train_split;
  Rng eval_rng(mix_seed(seed, 203));
  eval_rng.shuffle(eval);
  eval.resize(std::max<size_t>(1, eval.size() / 2));
  std::sort(eval.begin(), eval.end());
  w.eval_split = eval;

  w.rebuild_indexes();
  return w;
}

void World::rebuild_indexes() {
  word_to_token_.clear();
  for (int i = 0; i < static_cast<int>(vocab.size()); ++i) word_to_token_[vocab[i]] = i;
  fact_index_.clear();
  for (const Fact& f : facts) {
    auto key = std::make_pair(f.entity, f.relation);
    if (!fact_index_.emplace(key, f.id).second)
      throw std::runtime_error("world: duplicate (entity, relation) fact");
  }
  multi_fact_index_.clear();
  for (const MultiFact& f : multi_facts) {
    auto key = std::make_pair(f.entity, f.year_token);
    if (!multi_fact_index_.emplace(key, f.id).second)
      throw std::runtime_error("world: duplicate (entity, year) fact");
  }
}

int World::token(const std::string& word) const {
  auto it = word_to_token_.find(word);
  if (it == word_to_token_.end()) throw std::invalid_argument("unknown word: " + word);
  return it->second;
}

const std::string& World::word(int tok) const {
  if (tok < 0 || tok >= vocab_size()) throw std::invalid_argument("token id out of range");
  return vocab[tok];
}

std::string World::detokenize(const std::vector<int>& toks) const {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += word(toks[i]);
  }
  return out;
}

const Fact& World::fact_of(int entity, int relation) const {
  auto it = fact_index_.find({entity, relation});
  if (it == fact_index_.end()) throw std::invalid_argument("no fact for (entity, relation)");
  return facts[it->second];
}

const MultiFact& World::multi_fact_of(int entity, int year_token) const {
  auto it = multi_fact_index_.find({entity, year_token});
  if (it == multi_fact_index_.end()) throw std::invalid_argument("no fact for (entity, year)");
  return multi_facts[it->second];
}

std::vector<int> World::group_templates(int group) const {
  std::vector<int> out;
  for (const auto& t : templates)
    if (t.group == group) out.push_back(t.id);
  return out;
}

std::vector<double> World::render_image(int entity, uint64_t sample_seed) const {
  if (entity < 0 || entity >= static_cast<int>(entities.size()))
    throw std::invalid_argument("render_image: unknown entity");
  const int n = image.n_patches();
  const int d = image.patch_dim;
  std::vector<double> out(static_cast<size_t>(n) * d);

  Rng bg(mix_seed(seed, 401));
  for (double& x : out) x = bg.normal();

  Rng sig(mix_seed(seed, 402, static_cast<uint64_t>(entity)));
  for (int p = image.first_signature_patch(); p < n; ++p)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(p) * d + j] = sig.normal();

  if (image.sigma_img > 0.0) {
    Rng noise(mix_seed(seed, 403, static_cast<uint64_t>(entity), sample_seed));
    for (double& x : out) x += image.sigma_img * noise.normal();
  }
  return out;
}

PromptSpec World::expand(const QuestionTemplate& t, int entity, int year_token,
                         const std::vector<int>& answer, uint64_t sample_seed,
                         PromptForm form, int image_entity) const {
  PromptSpec p;
  TokenSpan c_span, y_span;
  for (const std::string& wd : t.pattern) {
    int pos = static_cast<int>(p.question_tokens.size());
    if (wd == "[C]") {
      c_span = {pos, pos + 2};
      if (form == PromptForm::visual) {
        p.question_tokens.push_back(token("this"));
        p.question_tokens.push_back(token("entity"));
      } else {
        p.question_tokens.push_back(token("the"));
        p.question_tokens.push_back(entities.at(entity).name_token);
      }
    } else if (wd == "[Y]") {
      if (year_token < 0) throw std::invalid_argument("template has [Y] but fact has no year");
      y_span = {pos, pos + 1};
      p.question_tokens.push_back(year_token);
    } else {
      p.question_tokens.push_back(token(wd));
    }
  }
  if (c_span.empty()) throw std::invalid_argument("template lacks the [C] slot");

  if (form == PromptForm::visual) {
    p.visual_constraint_span = c_span;
    if (t.multi) p.text_constraint_span = y_span;
  } else {
    // Named prompts carry the entity in text; the name span (or the year for
    // the award family) is the corruptible text constraint.
    p.visual_constraint_span = {0, 0};
    p.text_constraint_span = t.multi ? y_span : c_span;
  }

  int img_entity = image_entity;
  if (img_entity == -2) img_entity = form == PromptForm::visual ? entity : -1;
  if (img_entity >= 0) p.image = render_image(img_entity, sample_seed);

  p.answer_tokens = answer;
  p.metadata.entity = entity;
  p.metadata.relation = t.relation;
  p.metadata.year_token = year_token;
  p.metadata.template_id = t.id;
  p.metadata.image_entity = img_entity;
  p.metadata.sample_seed = sample_seed;
  p.metadata.name_form = form == PromptForm::named;
  p.validate();
  return p;
}

PromptSpec World::make_prompt(const Fact& f, const QuestionTemplate& t, uint64_t sample_seed,
                              PromptForm form, int image_entity) const {
  if (t.multi || t.relation != f.relation)
    throw std::invalid_argument("make_prompt: template does not fit the fact's relation");
  return expand(t, f.entity, -1, {f.value_token}, sample_seed, form, image_entity);
}

PromptSpec World::make_multi_prompt(const MultiFact& f, const QuestionTemplate& t,
                                    uint64_t sample_seed, PromptForm form,
                                    int image_entity) const {
  if (!t.multi) throw std::invalid_argument("make_multi_prompt: not an award template");
  return expand(t, f.entity, f.year_token, {f.value_token}, sample_seed, form, image_entity);
}

PromptSpec World::paraphrase(const PromptSpec& prompt) const {
  std::vector<PromptSpec> all = paraphrases(prompt);
  if (all.empty()) throw std::invalid_argument("no paraphrase available");
  return all.front();
}

std::vector<PromptSpec> World::paraphrases(const PromptSpec& prompt) const {
  const QuestionTemplate& t = question_template(prompt.metadata.template_id);
  std::vector<int> group = group_templates(t.group);
  auto self = std::find(group.begin(), group.end(), t.id);
  if (self == group.end()) throw std::invalid_argument("prompt template missing from its group");
  std::rotate(group.begin(), self, group.end());  // others, in cyclic order after t

  PromptForm form = prompt.metadata.name_form ? PromptForm::named : PromptForm::visual;
  std::vector<PromptSpec> out;
  for (size_t i = 1; i < group.size(); ++i) {
    const QuestionTemplate& other = templates[group[i]];
    if (t.multi) {
      const MultiFact& f = multi_fact_of(prompt.metadata.entity, prompt.metadata.year_token);
      out.push_back(make_multi_prompt(f, other, prompt.metadata.sample_seed, form,
                                      prompt.metadata.image_entity));
    } else {
      const Fact& f = fact_of(prompt.metadata.entity, prompt.metadata.relation);
      out.push_back(make_prompt(f, other, prompt.metadata.sample_seed, form,
                                prompt.metadata.image_entity));
    }
  }
  return out;
}

int World::pick_distractor(const Fact& f, uint64_t seed_in) const {
  std::vector<int> candidates;
  for (const Entity& e : entities) {
    if (e.id == f.entity) continue;
    if (fact_of(e.id, f.relation).value_token != f.value_token) candidates.push_back(e.id);
  }
  if (candidates.empty()) throw std::runtime_error("no distractor entity exists");
  Rng rng(mix_seed(seed_in, 301));
  return candidates[rng.below(candidates.size())];
}

int World::other_year(const MultiFact& f) const {
  for (const MultiFact& g : multi_facts)
    if (g.entity == f.entity && g.year_token != f.year_token) return g.year_token;
  throw std::runtime_error("entity has no second year");
}

std::string World::to_json() const {
  ordered_json j;
  j["format"] = "mmtl-world";
  j["version"] = version;
  j["seed"] = seed;
  j["vocab"] = vocab;
  j["entities"] = ordered_json::array();
  for (const auto& e : entities)
    j["entities"].push_back({{"id", e.id}, {"name", e.name}, {"token", e.name_token}});
  j["relations"] = ordered_json::array();
  for (const auto& r : relations)
    j["relations"].push_back(
        {{"id", r.id}, {"name", r.name}, {"token", r.name_token}, {"values", r.value_tokens}});
  j["facts"] = ordered_json::array();
  for (const auto& f : facts)
    j["facts"].push_back(
        {{"id", f.id}, {"entity", f.entity}, {"relation", f.relation}, {"value", f.value_token}});
  j["multi_facts"] = ordered_json::array();
  for (const auto& f : multi_facts)
    j["multi_facts"].push_back(
        {{"id", f.id}, {"entity", f.entity}, {"year", f.year_token}, {"value", f.value_token}});
  j["templates"] = ordered_json::array();
  for (const auto& t : templates)
    j["templates"].push_back({{"id", t.id},
                              {"relation", t.relation},
                              {"group", t.group},
                              {"multi", t.multi},
                              {"pattern", t.pattern}});
  j["splits"] = {{"train", train_split}, {"eval", eval_split}, {"longtail", longtail_split}};
  j["image"] = {{"mode", image.mode},
                {"sigma_img", image.sigma_img},
                {"patch_grid", image.patch_grid},
                {"patch_dim", image.patch_dim}};
  return j.dump(2) + "\n";
}

World World::from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text);
  if (j.value("format", "") != "mmtl-world")
    throw std::runtime_error("not a world document");
  World w;
  w.version = j.at("version").get<int>();
  if (w.version != 1) throw std::runtime_error("unsupported world version");
  w.seed = j.at("seed").get<uint64_t>();
  w.vocab = j.at("vocab").get<std::vector<std::string>>();
  for (const auto& e : j.at("entities"))
    w.entities.push_back({e.at("id").get<int>(), e.at("name").get<std::string>(),
                          e.at("token").get<int>()});
  for (const auto& r : j.at("relations")) {
    Relation rel;
    rel.id = r.at("id").get<int>();
    rel.name = r.at("name").get<std::string>();
    rel.name_token = r.at("token").get<int>();
    rel.value_tokens = r.at("values").get<std::vector<int>>();
    w.relations.push_back(rel);
  }
  for (const auto& f : j.at("facts"))
    w.facts.push_back({f.at("id").get<int>(), f.at("entity").get<int>(),
                       f.at("relation").get<int>(), f.at("value").get<int>()});
  for (const auto& f : j.at("multi_facts"))
    w.multi_facts.push_back({f.at("id").get<int>(), f.at("entity").get<int>(),
                             f.at("year").get<int>(), f.at("value").get<int>()});
  for (const auto& t : j.at("templates")) {
    QuestionTemplate qt;
    qt.id = t.at("id").get<int>();
    qt.relation = t.at("relation").get<int>();
    qt.group = t.at("group").get<int>();
    qt.multi = t.at("multi").get<bool>();
    qt.pattern = t.at("pattern").get<std::vector<std::string>>();
    w.templates.push_back(qt);
  }
  w.train_split = j.at("splits").at("train").get<std::vector<int>>();
  w.eval_split = j.at("splits").at("eval").get<std::vector<int>>();
  w.longtail_split = j.at("splits").at("longtail").get<std::vector<int>>();
  w.image.mode = j.at("image").at("mode").get<std::string>();
  w.image.sigma_img = j.at("image").at("sigma_img").get<double>();
  w.image.patch_grid = j.at("image").at("patch_grid").get<int>();
  w.image.patch_dim = j.at("image").at("patch_dim").get<int>();
  for (size_t i = 0; i < w.facts.size(); ++i)
    if (w.facts[i].id != static_cast<int>(i))
      throw std::runtime_error("world: fact ids must be dense and ordered");
  w.rebuild_indexes();
  return w;
}

void World::save(const std::string& path) const { atomic_write_file(path, to_json()); }

World World::load(const std::string& path) { return from_json(read_file(path)); }

}  // namespace mmtl
