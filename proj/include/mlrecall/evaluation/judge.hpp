#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>

#include "mlrecall/core/csv.hpp"
#include "mlrecall/core/hash.hpp"
#include "mlrecall/lens/logit_lens.hpp"

namespace mlrecall {

enum class JudgeMode { ExactSubstring, LemmaSynonym, ExternalLlm };
enum class JudgeFallback { Fail, Degrade };

inline const char* to_string(JudgeMode m) {
  switch (m) {
  case JudgeMode::ExactSubstring: return "exact_substring";
  case JudgeMode::LemmaSynonym: return "lemma_synonym";
  case JudgeMode::ExternalLlm: return "external_llm";
  }
  return "?";
}

inline JudgeMode judge_mode_from_string(const std::string& s) {
  for (auto m : {JudgeMode::ExactSubstring, JudgeMode::LemmaSynonym, JudgeMode::ExternalLlm})
    if (s == to_string(m)) return m;
  throw SpecError("unknown judge mode '" + s + "'");
}

inline const std::string& default_rubric() {
  static const std::string r =
      "Rate how well the candidate word matches the reference concept, from 0 to 1.\n"
      "1.0 - Exact match with the reference word.\n"
      "0.8-0.99 - Conceptual synonym or close paraphrase (e.g. \"hue\" for \"color\", \"dialect\" for \"language\").\n"
      "0.5-0.8 - Loosely related or contextually associated term (e.g. \"paint\" for \"color\", \"accent\" for "
      "\"language\").\n"
      "< 0.5 - Category member or specific instance of the concept (e.g. \"red\" for \"color\", \"yen\" for "
      "\"currency\", \"Spanish\" for \"language\").\n"
      "< 0.2 - Unrelated or irrelevant term.\n"
      "If a token looks like a truncated or partial form of a meaningful word (e.g. \"pigm\" for \"pigment\"), "
      "score it by its intended meaning.\n"
      "Reply with JSON {\"score\": <number>}.";
  return r;
}

struct JudgeConfig {
  JudgeMode mode = JudgeMode::ExactSubstring;
  double threshold = 0.8;
  std::string rubric = default_rubric();
  std::optional<std::string> endpoint; // http(s)://host[:port]/path
  JudgeFallback fallback = JudgeFallback::Fail;
  std::optional<std::filesystem::path> cache_path;
  double timeout_seconds = 30;

  void validate() const {
    if (!(threshold > 0 && threshold <= 1)) throw SpecError("judge threshold must be in (0, 1]");
    if (mode == JudgeMode::ExternalLlm && (!endpoint || endpoint->empty()))
      throw SpecError("external_llm judge needs an endpoint");
  }
};

struct JudgeResult {
  bool accepted = false;
  double score = 0;
  JudgeMode mode_used = JudgeMode::ExactSubstring;
  bool from_cache = false;
};

// ---- lemma + taxonomy ------------------------------------------------------

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

} // namespace detail

// Rule-based English lemmatizer: enough for relation words and their
// inflections; irregular forms listed explicitly.
inline std::string lemmatize(std::string_view word) {
  std::string w = text::casefold(text::trim(word));
  while (!w.empty() && std::ispunct(static_cast<unsigned char>(w.back()))) w.pop_back();
  static const std::map<std::string, std::string> irregular{
      {"written", "write"}, {"wrote", "write"},   {"spoken", "speak"},  {"spoke", "speak"},  {"born", "birth"},
      {"colors", "color"},  {"colour", "color"},  {"colours", "color"}, {"families", "family"},
      {"countries", "country"}, {"currencies", "currency"}, {"biologically", "biological"},
      {"biology", "biological"}, {"originally", "original"}, {"classified", "classify"}, {"played", "play"},
      {"attended", "attend"}, {"practiced", "practice"}, {"practised", "practice"}, {"languages", "language"},
      {"hues", "hue"}, {"tongues", "tongue"}, {"dialects", "dialect"}};
  if (auto it = irregular.find(w); it != irregular.end()) return it->second;
  using detail::ends_with;
  if (w.size() > 4 && ends_with(w, "ies")) return w.substr(0, w.size() - 3) + "y";
  if (w.size() > 4 && (ends_with(w, "sses") || ends_with(w, "shes") || ends_with(w, "ches") || ends_with(w, "xes")))
    return w.substr(0, w.size() - 2);
  if (w.size() > 3 && ends_with(w, "s") && !ends_with(w, "ss") && !ends_with(w, "us") && !ends_with(w, "is"))
    return w.substr(0, w.size() - 1);
  if (w.size() > 5 && ends_with(w, "ing")) return w.substr(0, w.size() - 3);
  return w;
}

struct Concept {
  std::set<std::string> synonyms;  // 0.9
  std::set<std::string> related;   // 0.65
  std::set<std::string> instances; // 0.3
};

// Built-in taxonomy around the relation words of the fact dataset.
inline const std::map<std::string, Concept>& relation_taxonomy() {
  static const std::map<std::string, Concept> t{
      {"color", {{"hue", "shade", "tint", "tone", "colour"}, {"paint", "pigment", "dye", "appearance"},
                 {"red", "blue", "green", "yellow", "white", "black", "orange", "purple", "brown", "pink", "gray"}}},
      {"language", {{"tongue", "dialect", "idiom", "lingo", "vernacular"}, {"accent", "speech", "grammar", "word", "linguistic"},
                    {"english", "spanish", "french", "chinese", "japanese", "korean", "arabic", "portuguese", "german"}}},
      {"currency", {{"money", "coinage", "tender"}, {"cash", "coin", "bank", "price", "exchange", "payment"},
                    {"yen", "dollar", "euro", "pound", "peso", "real", "baht", "won", "yuan", "rupee"}}},
      {"religion", {{"faith", "creed", "belief", "worship"}, {"church", "temple", "god", "spiritual", "sacred"},
                    {"buddhism", "islam", "christianity", "hinduism", "judaism", "catholicism"}}},
      {"practice", {{"observe", "follow", "exercise"}, {"ritual", "custom", "habit"}, {}}},
      {"family", {{"group", "lineage", "branch", "stock"}, {"relative", "ancestor", "tree", "household"}, {}}},
      {"birth", {{"nativity", "origin", "native"}, {"baby", "born", "hometown", "childhood"}, {}}},
      {"country", {{"nation", "state", "land", "homeland"}, {"government", "border", "region", "territory"},
                   {"japan", "china", "france", "spain", "germany", "poland", "brazil", "mexico", "thailand"}}},
      {"instrument", {{"device", "apparatus"}, {"music", "tool", "sound", "orchestra"},
                      {"piano", "guitar", "violin", "cello", "drum", "flute", "trumpet", "saxophone"}}},
      {"play", {{"perform", "strum", "sound"}, {"music", "concert", "song", "stage"}, {}}},
      {"college", {{"university", "academy", "school", "institute"}, {"campus", "education", "degree", "student"},
                   {"harvard", "stanford", "oxford", "columbia", "waseda"}}},
      {"attend", {{"study", "enroll", "go"}, {"visit", "join", "graduate"}, {}}},
      {"classify", {{"categorize", "categorise", "class", "category", "taxonomy", "type"}, {"group", "label", "sort", "kind"},
                    {"mammal", "bird", "reptile", "amphibian", "fish", "insect"}}},
      {"biological", {{"biologic", "organic"}, {"life", "nature", "science", "species", "gene"}, {}}},
      {"write", {{"author", "compose", "pen", "draft"}, {"text", "book", "novel", "author", "publish"}, {}}},
      {"original", {{"initial", "first", "earliest"}, {"source", "primary", "native"}, {}}},
  };
  return t;
}

// Similarity of two English words under the taxonomy, in [0, 1].
inline double taxonomy_similarity(std::string_view candidate, std::string_view reference) {
  const auto c = lemmatize(candidate), r = lemmatize(reference);
  if (c.empty() || r.empty()) return 0.0;
  if (c == r) return 1.0;
  const auto& tax = relation_taxonomy();
  auto level = [&](const std::string& concept_word, const std::string& other) -> double {
    auto it = tax.find(concept_word);
    if (it == tax.end()) return 0.0;
    if (it->second.synonyms.count(other)) return 0.9;
    if (it->second.related.count(other)) return 0.65;
    if (it->second.instances.count(other)) return 0.3;
    return 0.0;
  };
  return std::max(level(r, c), level(c, r));
}

// ---- external judge --------------------------------------------------------

struct Endpoint {
  std::string scheme_host_port;
  std::string path;
};

inline Endpoint parse_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw SpecError("judge endpoint '" + url + "' needs an http:// or https:// scheme");
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw SpecError("unsupported judge endpoint scheme '" + scheme + "'");
  const auto path_at = url.find('/', scheme_end + 3);
  if (path_at == std::string::npos) return {url, "/"};
  return {url.substr(0, path_at), url.substr(path_at)};
}

// Append-only JSONL store keyed by a content hash of the request.
class JudgeCache {
public:
  JudgeCache() = default;
  explicit JudgeCache(std::filesystem::path path) : path_(std::move(path)) { load(); }

  static std::string key(JudgeMode mode, const std::string& rubric, const std::string& candidate,
                         const std::string& reference) {
    return sha256_hex(nlohmann::json{to_string(mode), rubric, candidate, reference}.dump());
  }

  std::optional<double> get(const std::string& k) const {
    std::lock_guard lock(mu_);
    auto it = scores_.find(k);
    if (it == scores_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& k, JudgeMode mode, const std::string& candidate, const std::string& reference,
           double score) {
    std::lock_guard lock(mu_);
    if (scores_.count(k)) return;
    scores_[k] = score;
    if (path_.empty()) return;
    const auto ts = std::chrono::duration_cast<std::chrono::seconds>(
                        std::chrono::system_clock::now().time_since_epoch())
                        .count();
    std::ofstream f(path_, std::ios::app);
    f << nlohmann::json{{"key", k},         {"candidate", candidate}, {"reference", reference},
                        {"mode", to_string(mode)}, {"score", score},         {"timestamp", ts}}
             .dump()
      << '\n';
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return scores_.size();
  }

private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::string, double> scores_;

  void load() {
    std::ifstream f(path_);
    std::string line;
    while (std::getline(f, line)) {
      if (text::trim(line).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        scores_[j.at("key").get<std::string>()] = j.at("score").get<double>();
      } catch (const nlohmann::json::exception&) {
        // A torn final line from an interrupted run is ignored.
      }
    }
  }
};

class Judge {
public:
  explicit Judge(JudgeConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    cache_ = cfg_.cache_path ? std::make_shared<JudgeCache>(*cfg_.cache_path) : std::make_shared<JudgeCache>();
  }

  const JudgeConfig& config() const { return cfg_; }
  const JudgeCache& cache() const { return *cache_; }

  JudgeResult judge(const std::string& candidate, const std::string& reference) const {
    if (text::trim(candidate).empty() || text::trim(reference).empty())
      throw DomainError("judge inputs must be non-empty");
    switch (cfg_.mode) {
    case JudgeMode::ExactSubstring: {
      const bool ok = token_matches_answer(candidate, reference);
      return {ok, ok ? 1.0 : 0.0, JudgeMode::ExactSubstring, false};
    }
    case JudgeMode::LemmaSynonym: return lemma(candidate, reference);
    case JudgeMode::ExternalLlm: return external(candidate, reference);
    }
    throw Error("unknown judge mode");
  }

  bool operator()(const std::string& candidate, const std::string& reference) const {
    return judge(candidate, reference).accepted;
  }

  EquivalenceJudge as_equivalence() const {
    return [this](const std::string& c, const std::string& r) { return judge(c, r).accepted; };
  }

private:
  JudgeConfig cfg_;
  std::shared_ptr<JudgeCache> cache_;

  JudgeResult lemma(const std::string& candidate, const std::string& reference) const {
    const double s = taxonomy_similarity(candidate, reference);
    return {s > 0 && s > cfg_.threshold, s, JudgeMode::LemmaSynonym, false};
  }

  JudgeResult external(const std::string& candidate, const std::string& reference) const {
    const auto k = JudgeCache::key(JudgeMode::ExternalLlm, cfg_.rubric, candidate, reference);
    if (auto s = cache_->get(k)) return {*s > cfg_.threshold, *s, JudgeMode::ExternalLlm, true};
    try {
      const double s = request(candidate, reference);
      cache_->put(k, JudgeMode::ExternalLlm, candidate, reference, s);
      return {s > cfg_.threshold, s, JudgeMode::ExternalLlm, false};
    } catch (const JudgeUnavailableError&) {
      if (cfg_.fallback == JudgeFallback::Degrade) return lemma(candidate, reference);
      throw;
    }
  }

  double request(const std::string& candidate, const std::string& reference) const {
    const auto ep = parse_endpoint(*cfg_.endpoint);
    httplib::Client cli(ep.scheme_host_port);
    const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
    cli.set_connection_timeout(secs, 0);
    cli.set_read_timeout(secs, 0);
    const nlohmann::json body{{"rubric", cfg_.rubric}, {"word", candidate}, {"reference", reference}};
    auto res = cli.Post(ep.path, body.dump(), "application/json");
    if (!res) throw JudgeUnavailableError("judge endpoint " + *cfg_.endpoint + " unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200)
      throw JudgeUnavailableError("judge endpoint " + *cfg_.endpoint + " returned HTTP " + std::to_string(res->status));
    try {
      const double s = nlohmann::json::parse(res->body).at("score").get<double>();
      if (!(s >= 0 && s <= 1)) throw JudgeUnavailableError("judge returned score " + format_number(s) + " outside [0, 1]");
      return s;
    } catch (const nlohmann::json::exception& e) {
      throw JudgeUnavailableError(std::string("judge response is not {\"score\": number}: ") + e.what());
    }
  }
};

inline JudgeResult judge_equivalent(const std::string& candidate, const std::string& reference,
                                    const JudgeConfig& config) {
  return Judge(config).judge(candidate, reference);
}

} // namespace mlrecall
