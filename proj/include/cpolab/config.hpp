#pragma once

// JSON configuration. A config file holds the TrainConfig fields, with
// optional "model", "generator" and "eval" sections:
//
//   {"lr": 1e-5, "weight_decay": 0.05, "batch_size": 16, "steps": 500,
//    "objective": "CPO", "seed": 1,
//    "cpo": {"beta": 5, "K": 12, "use_ranking": true},
//    "sampler": {"topk": 50, "swap_fraction": 0.15, "seed": 0,
//                "mix": {"n_bn": 3, "n_mn": 5, "n_tn": 3, "n_an": 0}}}
//
// Every field is optional; unknown keys are rejected.

#include <filesystem>
#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "cpolab/checkpoint.hpp"
#include "cpolab/error.hpp"
#include "cpolab/markov.hpp"
#include "cpolab/model.hpp"
#include "cpolab/negatives.hpp"
#include "cpolab/objectives.hpp"
#include "cpolab/train.hpp"

namespace cpolab {

using Json = nlohmann::json;

namespace detail {

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  require(j.is_object(), where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    require(known, "unknown config key '" + key + "' in " + where);
  }
}

template <typename T>
void read_field(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ValidationError("config field '" + std::string(key) + "' in " + where + " has the wrong type");
  }
}

}  // namespace detail

inline CPOConfig cpo_config_from_json(const Json& j) {
  detail::check_keys(j, "cpo", {"beta", "K", "use_ranking"});
  CPOConfig c;
  detail::read_field(j, "beta", c.beta, "cpo");
  detail::read_field(j, "K", c.K, "cpo");
  detail::read_field(j, "use_ranking", c.use_ranking, "cpo");
  return c;
}

inline NegativeSamplerConfig sampler_config_from_json(const Json& j) {
  detail::check_keys(j, "sampler", {"topk", "swap_fraction", "mix", "seed"});
  NegativeSamplerConfig c;
  detail::read_field(j, "topk", c.topk, "sampler");
  detail::read_field(j, "swap_fraction", c.swap_fraction, "sampler");
  detail::read_field(j, "seed", c.seed, "sampler");
  if (j.contains("mix")) {
    const auto& m = j.at("mix");
    detail::check_keys(m, "sampler.mix", {"n_bn", "n_mn", "n_tn", "n_an"});
    detail::read_field(m, "n_bn", c.mix.n_bn, "sampler.mix");
    detail::read_field(m, "n_mn", c.mix.n_mn, "sampler.mix");
    detail::read_field(m, "n_tn", c.mix.n_tn, "sampler.mix");
    detail::read_field(m, "n_an", c.mix.n_an, "sampler.mix");
  }
  return c;
}

inline ModelConfig model_config_from_json(const Json& j) {
  detail::check_keys(j, "model", {"vocab_size", "d_model", "n_layers", "n_heads", "max_context"});
  ModelConfig c;
  detail::read_field(j, "vocab_size", c.vocab_size, "model");
  detail::read_field(j, "d_model", c.d_model, "model");
  detail::read_field(j, "n_layers", c.n_layers, "model");
  detail::read_field(j, "n_heads", c.n_heads, "model");
  detail::read_field(j, "max_context", c.max_context, "model");
  return c;
}

inline MarkovSpec generator_from_json(const Json& j) {
  detail::check_keys(j, "generator",
                     {"vocab_size", "prefix_len", "max_cont_len", "branching", "min_eos", "max_eos", "smoothing", "seed"});
  MarkovSpec s;
  detail::read_field(j, "vocab_size", s.vocab_size, "generator");
  detail::read_field(j, "prefix_len", s.prefix_len, "generator");
  detail::read_field(j, "max_cont_len", s.max_cont_len, "generator");
  detail::read_field(j, "branching", s.branching, "generator");
  detail::read_field(j, "min_eos", s.min_eos, "generator");
  detail::read_field(j, "max_eos", s.max_eos, "generator");
  detail::read_field(j, "smoothing", s.smoothing, "generator");
  detail::read_field(j, "seed", s.seed, "generator");
  return s;
}

inline EvalConfig eval_config_from_json(const Json& j) {
  detail::check_keys(j, "eval", {"interval", "n_groups", "n_win", "n_rkl_prefixes", "samples_per_prefix", "topk",
                                 "max_new", "group_batch", "seed"});
  EvalConfig e;
  detail::read_field(j, "interval", e.interval, "eval");
  detail::read_field(j, "n_groups", e.n_groups, "eval");
  detail::read_field(j, "n_win", e.n_win, "eval");
  detail::read_field(j, "n_rkl_prefixes", e.n_rkl_prefixes, "eval");
  detail::read_field(j, "samples_per_prefix", e.samples_per_prefix, "eval");
  detail::read_field(j, "topk", e.topk, "eval");
  detail::read_field(j, "max_new", e.max_new, "eval");
  detail::read_field(j, "group_batch", e.group_batch, "eval");
  detail::read_field(j, "seed", e.seed, "eval");
  return e;
}

/// Everything a config file can carry.
struct ConfigFile {
  TrainConfig train;
  ModelConfig model;
  MarkovSpec generator;
  EvalConfig eval;
};

inline ConfigFile config_from_json(const Json& j) {
  detail::check_keys(j, "config", {"lr", "weight_decay", "batch_size", "steps", "objective", "cpo", "sampler", "seed",
                                   "model", "generator", "eval"});
  ConfigFile c;
  auto& t = c.train;
  detail::read_field(j, "lr", t.lr, "config");
  detail::read_field(j, "weight_decay", t.weight_decay, "config");
  detail::read_field(j, "batch_size", t.batch_size, "config");
  detail::read_field(j, "steps", t.steps, "config");
  detail::read_field(j, "seed", t.seed, "config");
  if (j.contains("objective")) {
    require(j.at("objective").is_string(), "config field 'objective' must be a string");
    t.objective = parse_objective(j.at("objective").get<std::string>());
  }
  if (j.contains("cpo")) t.cpo = cpo_config_from_json(j.at("cpo"));
  if (j.contains("sampler")) t.sampler = sampler_config_from_json(j.at("sampler"));
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("generator")) c.generator = generator_from_json(j.at("generator"));
  if (j.contains("eval")) c.eval = eval_config_from_json(j.at("eval"));
  return c;
}

inline ConfigFile parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ConfigFile load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

inline Json to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"weight_decay", t.weight_decay},
          {"batch_size", t.batch_size},
          {"steps", t.steps},
          {"objective", to_string(t.objective)},
          {"seed", t.seed},
          {"cpo", {{"beta", t.cpo.beta}, {"K", t.cpo.K}, {"use_ranking", t.cpo.use_ranking}}},
          {"sampler",
           {{"topk", t.sampler.topk},
            {"swap_fraction", t.sampler.swap_fraction},
            {"seed", t.sampler.seed},
            {"mix",
             {{"n_bn", t.sampler.mix.n_bn},
              {"n_mn", t.sampler.mix.n_mn},
              {"n_tn", t.sampler.mix.n_tn},
              {"n_an", t.sampler.mix.n_an}}}}}};
}

}  // namespace cpolab
