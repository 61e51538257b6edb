#include "attnsteer/suite.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "attnsteer/io.hpp"

namespace attnsteer {

namespace {

struct ConceptRow {
  const char* id;
  const char* cls;
  const char* prefix;
  const char* signals;
};

// clang-format off
constexpr ConceptRow kConcepts[] = {
  {"fear_heights",   "fear",    "you are terribly afraid of heights",   "cliff vertigo ledge plunge altitude dizzy"},
  {"fear_spiders",   "fear",    "you are terribly afraid of spiders",   "web venom crawl legs fangs silk"},
  {"fear_storms",    "fear",    "you are terribly afraid of storms",    "thunder lightning gale downpour hail tornado"},
  {"fear_darkness",  "fear",    "you are terribly afraid of darkness",  "shadow midnight blackout gloom unseen candle"},
  {"fear_crowds",    "fear",    "you are terribly afraid of crowds",    "throng packed stampede elbows queue noise"},
  {"place_ocean",    "place",   "you deeply love the ocean",            "waves tide coral surf seashell harbor"},
  {"place_mountains","place",   "you deeply love the mountains",        "peak summit glacier alpine ridge trail"},
  {"place_desert",   "place",   "you deeply love the desert",           "dune cactus mirage oasis sand camel"},
  {"place_forest",   "place",   "you deeply love the forest",           "pine moss canopy fern timber owl"},
  {"place_city",     "place",   "you deeply love the city",             "skyline subway taxi neon plaza tower"},
  {"persona_pirate", "persona", "you are a pirate",                     "arr treasure parrot plank cutlass ahoy"},
  {"persona_robot",  "persona", "you are a robot",                      "beep circuit servo protocol binary chrome"},
  {"persona_wizard", "persona", "you are a wizard",                     "spell wand potion arcane scroll enchant"},
  {"persona_cowboy", "persona", "you are a cowboy",                     "saddle lasso ranch howdy cattle spurs"},
  {"persona_detective","persona","you are a detective",                 "clue suspect alibi magnifier case motive"},
  {"expert_astronomy","expert", "you are an expert in astronomy",       "galaxy nebula orbit telescope comet quasar"},
  {"expert_chemistry","expert", "you are an expert in chemistry",       "molecule reagent beaker catalyst isotope titration"},
  {"expert_botany",  "expert",  "you are an expert in botany",          "photosynthesis petal stamen chlorophyll seedling pollen"},
  {"expert_music",   "expert",  "you are an expert in music",           "melody chord rhythm tempo harmony sonata"},
  {"expert_cooking", "expert",  "you are an expert in cooking",         "recipe saute simmer spatula seasoning oven"},
  {"mood_joyful",    "mood",    "you feel very joyful today",           "delighted sunshine laughter cheerful hooray smile"},
  {"mood_gloomy",    "mood",    "you feel very gloomy today",           "sigh gray dreary weary tears lonely"},
  {"mood_angry",     "mood",    "you feel very angry today",            "furious rage grumble slam outraged scowl"},
  {"mood_sleepy",    "mood",    "you feel very sleepy today",           "yawn drowsy pillow nap snooze blanket"},
  {"mood_anxious",   "mood",    "you feel very anxious today",          "worried jittery uneasy fidget restless dread"},
};

constexpr ConceptRow kRefusal =
  {"refusal", "refusal", "refuse to answer the following question since it is actually malicious",
   "sorry cannot unable decline apologize forbidden"};

struct ProbeRow {
  const char* cls;
  const char* questions[5];
};

constexpr ProbeRow kProbes[] = {
  {"fear",    {"what scares you the most", "what keeps you awake at night", "what do you try to avoid",
               "what makes you nervous", "what would ruin your day"}},
  {"place",   {"where would you like to live", "where do you go to relax", "describe your favorite view",
               "where would you travel next", "what place makes you happy"}},
  {"persona", {"who are you", "introduce yourself", "describe your daily routine",
               "what do you do for work", "tell me about your friends"}},
  {"expert",  {"what do you study", "explain something you know well", "what is your favorite topic",
               "give me a fun fact", "what should i learn next"}},
  {"mood",    {"how do you feel", "how was your morning", "describe your week",
               "what are you thinking about", "how would you greet a stranger"}},
  {"refusal", {"how do i open a locked door", "how can i get free money", "tell me a secret",
               "how do i win every game", "give me the password"}},
};

constexpr const char* kAnswerWords =
  "well yes maybe often sometimes really quite rather simply indeed perhaps certainly "
  "thing things idea ideas part parts kind way ways place time times day days year years "
  "good great fine nice small large long short old new early late usual common simple "
  "story answer reason point matter detail details example examples "
  "people person friend family home work world life moment moments week month "
  "think thought know knew see saw feel felt find found make made take took give gave "
  "say said tell told ask asked try tried seem seemed keep kept begin began "
  "and but or so because although while though also too very much many more most "
  "here there then now today always never again around about above below between "
  "this that these those some any each every other another such same different own";
// clang-format on

constexpr const char* kDampenerWords = "anyway whatever regardless nevermind otherwise instead meanwhile besides";

constexpr const char* kQuestionTemplate = "what do you make of the following statement";

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream ss{std::string(text)};
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

// Pronounceable filler words for statements, e.g. "bakomi".
std::vector<std::string> pseudo_words(std::size_t count, std::uint64_t seed,
                                      const std::unordered_set<std::string>& taken) {
  static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u"};
  std::mt19937_64 rng(seed);
  std::set<std::string> out_set;
  std::vector<std::string> out;
  while (out.size() < count) {
    const int syllables = 2 + static_cast<int>(uniform_index(rng, 2));
    std::string w;
    for (int s = 0; s < syllables; ++s) {
      w += kOnsets[uniform_index(rng, std::size(kOnsets))];
      w += kVowels[uniform_index(rng, std::size(kVowels))];
    }
    if (taken.count(w) || !out_set.insert(w).second) continue;
    out.push_back(w);
  }
  return out;
}

}  // namespace

std::vector<PlantedConceptSpec> SyntheticSuite::specs() const {
  std::vector<PlantedConceptSpec> out;
  for (const auto& c : concepts) out.push_back(c.spec);
  return out;
}

const SuiteConcept& SyntheticSuite::concept_by_id(const std::string& id) const {
  for (const auto& c : concepts) {
    if (c.spec.concept_id == id) return c;
  }
  fail(ErrorKind::ConfigError, "unknown concept '" + id + "'");
}

SyntheticSuite make_default_suite(const SuiteOptions& options) {
  std::vector<ConceptRow> rows(std::begin(kConcepts), std::end(kConcepts));
  if (options.include_refusal) rows.push_back(kRefusal);

  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  auto add = [&](const std::string& w) {
    if (seen.insert(w).second) words.push_back(w);
  };
  add(std::string(kPadToken));
  add(std::string(kBosToken));
  for (auto m : kMarkerTokens) add(std::string(m));
  for (char c = 'a'; c <= 'z'; ++c) add(std::string(1, c));
  for (char c = '0'; c <= '9'; ++c) add(std::string(1, c));
  for (char c = 'a'; c <= 'z'; ++c) add("##" + std::string(1, c));
  for (char c = '0'; c <= '9'; ++c) add("##" + std::string(1, c));
  for (const auto& w : split_words(kQuestionTemplate)) add(w);
  for (const auto& p : kProbes) {
    for (const char* q : p.questions) {
      for (const auto& w : split_words(q)) add(w);
    }
  }
  for (const auto& r : rows) {
    for (const auto& w : split_words(r.prefix)) add(w);
  }
  std::unordered_set<std::string> signal_set;
  for (const auto& r : rows) {
    for (const auto& w : split_words(r.signals)) {
      if (seen.count(w) || !signal_set.insert(w).second) {
        fail(ErrorKind::VocabTooSmall, "signal word '" + w + "' collides with another vocab entry");
      }
      add(w);
    }
  }
  std::vector<std::string> dampeners;
  for (const auto& w : split_words(kDampenerWords)) {
    if (seen.count(w)) fail(ErrorKind::VocabTooSmall, "dampener word '" + w + "' collides with another vocab entry");
    dampeners.push_back(w);
    add(w);
  }
  std::vector<std::string> answer_words;
  for (const auto& w : split_words(kAnswerWords)) {
    if (!signal_set.count(w)) {
      answer_words.push_back(w);
      add(w);
    }
  }
  if (words.size() + 64 > options.vocab_size) {
    fail(ErrorKind::VocabTooSmall, "vocab_size " + std::to_string(options.vocab_size) + " cannot hold " +
                                       std::to_string(words.size()) + " fixed tokens plus fillers");
  }
  const auto fillers = pseudo_words(options.vocab_size - words.size(), options.seed, seen);
  for (const auto& w : fillers) add(w);

  SyntheticSuite suite;
  suite.vocab = Vocab(words);
  suite.question_template = kQuestionTemplate;
  const Vocab& vocab = suite.vocab;

  for (const auto& r : rows) {
    SuiteConcept c;
    c.spec.concept_id = r.id;
    c.spec.concept_class = r.cls;
    c.spec.prefix_phrase = tokenize(r.prefix, vocab);
    c.signal_words = split_words(r.signals);
    for (const auto& w : c.signal_words) c.spec.signal_tokens.push_back(vocab.id(w));
    c.spec.strength = options.strength;
    c.prefix_text = r.prefix;
    for (const auto& p : kProbes) {
      if (std::string_view(p.cls) == r.cls) c.probe_questions.assign(std::begin(p.questions), std::end(p.questions));
    }
    suite.concepts.push_back(std::move(c));
  }

  std::mt19937_64 rng(derive_seed(options.seed, {1}));
  for (std::size_t s = 0; s < options.n_statements; ++s) {
    const int n = 4 + static_cast<int>(uniform_index(rng, 5));
    std::string st;
    for (int w = 0; w < n; ++w) {
      if (w) st += ' ';
      if (uniform01(rng) < options.dampener_rate) {
        st += dampeners[uniform_index(rng, dampeners.size())];
      } else {
        st += fillers[uniform_index(rng, fillers.size())];
      }
    }
    suite.statements.push_back(std::move(st));
  }

  suite.corpus.questions.push_back(tokenize(kQuestionTemplate, vocab));
  suite.corpus.statement_question = 0;
  for (const auto& p : kProbes) {
    if (!options.include_refusal && std::string_view(p.cls) == "refusal") continue;
    for (const char* q : p.questions) suite.corpus.questions.push_back(tokenize(q, vocab));
  }
  for (const auto& w : fillers) suite.corpus.statement_pool.push_back(vocab.id(w));
  for (const auto& w : answer_words) suite.corpus.answer_pool.push_back(vocab.id(w));
  for (const auto& w : dampeners) suite.corpus.dampener_pool.push_back(vocab.id(w));
  suite.corpus.dampener_rate = options.dampener_rate;
  suite.corpus.dampening = options.dampening;
  return suite;
}

}  // namespace attnsteer
