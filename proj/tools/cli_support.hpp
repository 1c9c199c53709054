#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "mlrecall/core/error.hpp"
#include "mlrecall/core/text.hpp"

namespace mlrecall::cli {

// A bad combination of otherwise well-formed flags.
class UsageError : public Error {
public:
  using Error::Error;
};

// Expands `--config FILE` (a flat JSON object such as {"model": "toy:7",
// "layers": "1-3", "strict": true}) into ordinary long options appended to the
// argument list. Options already on the command line win. Arrays are joined
// with commas, true becomes a bare flag and false is dropped.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  auto scalar = [](const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return v.dump();
    throw UsageError("config values must be strings, numbers, booleans or arrays of those");
  };
  for (const auto& [k, v] : j.items()) {
    const auto flag = "--" + k;
    const bool given = std::any_of(args.begin(), args.end(),
                                   [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
    if (given) continue;
    if (v.is_boolean()) {
      if (v.get<bool>()) args.push_back(flag);
      continue;
    }
    std::string value;
    if (v.is_array()) {
      for (const auto& e : v) value += (value.empty() ? "" : ",") + scalar(e);
    } else {
      value = scalar(v);
    }
    args.push_back(flag);
    args.push_back(value);
  }
  return args;
}


// "20-27", "1,3,5-7" -> sorted unique indices.
inline std::vector<std::size_t> parse_index_list(const std::string& spec) {
  std::vector<std::size_t> out;
  for (const auto& part : text::split(spec, ',')) {
    const auto p = text::trim(part);
    if (p.empty()) continue;
    try {
      const auto dash = p.find('-', 1);
      if (dash == std::string::npos) {
        out.push_back(std::stoul(p));
      } else {
        const auto lo = std::stoul(p.substr(0, dash)), hi = std::stoul(p.substr(dash + 1));
        if (hi < lo) throw UsageError("descending range '" + p + "'");
        for (auto i = lo; i <= hi; ++i) out.push_back(i);
      }
    } catch (const std::logic_error&) {
      throw UsageError("cannot parse index list '" + spec + "'");
    }
  }
  if (out.empty()) throw UsageError("empty index list '" + spec + "'");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// "1-4" (integer steps) or "0.5,1,2".
inline std::vector<double> parse_number_list(const std::string& spec) {
  std::vector<double> out;
  for (const auto& part : text::split(spec, ',')) {
    const auto p = text::trim(part);
    if (p.empty()) continue;
    try {
      const auto dash = p.find('-', 1);
      if (dash == std::string::npos) {
        out.push_back(std::stod(p));
      } else {
        const auto lo = std::stod(p.substr(0, dash)), hi = std::stod(p.substr(dash + 1));
        if (hi < lo) throw UsageError("descending range '" + p + "'");
        for (double v = lo; v <= hi + 1e-9; v += 1.0) out.push_back(v);
      }
    } catch (const std::logic_error&) {
      throw UsageError("cannot parse number list '" + spec + "'");
    }
  }
  if (out.empty()) throw UsageError("empty number list '" + spec + "'");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline std::vector<std::string> parse_name_list(const std::string& spec) {
  std::vector<std::string> out;
  for (const auto& p : text::split(spec, ','))
    if (auto t = text::trim(p); !t.empty()) out.push_back(t);
  return out;
}

// Effective configuration of a parsed subcommand: every option that was given
// (flag, file or environment) or has a default. Options that do not affect
// results are left out so they do not change the config hash.
inline nlohmann::json effective_config(const CLI::App& app, const std::vector<std::string>& exclude) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto* opt : app.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (name == "help" || name == "config" ||
        std::find(exclude.begin(), exclude.end(), name) != exclude.end())
      continue;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      j[name] = r.size() == 1 ? nlohmann::json(r.front()) : nlohmann::json(r);
    } else if (!opt->get_default_str().empty()) {
      j[name] = opt->get_default_str();
    }
  }
  for (const auto* sub : app.get_subcommands()) j[sub->get_name()] = effective_config(*sub, exclude);
  return j;
}

} // namespace mlrecall::cli
