#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tspf/baselines.hpp"
#include "tspf/losses.hpp"
#include "tspf/model.hpp"
#include "tspf/nn.hpp"
#include "tspf/tensor.hpp"

namespace tspf {

// JSON checkpoints. Doubles are emitted with shortest-round-trip encoding,
// so a load reproduces every parameter bit for bit.

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape}, {"values", t.values}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

inline nlohmann::json mlp_to_json(const Mlp& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < m.layer_count(); ++l)
    layers.push_back({{"w", tensor_to_json(m.weight(l).value())},
                      {"b", tensor_to_json(m.bias(l).value())}});
  return nlohmann::json{{"activation", activation_name(m.activation())},
                        {"frozen", m.frozen()},
                        {"layers", layers}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  std::vector<Tensor> ws, bs;
  for (const auto& layer : j.at("layers")) {
    ws.push_back(tensor_from_json(layer.at("w")));
    bs.push_back(tensor_from_json(layer.at("b")));
  }
  Mlp m(std::move(ws), std::move(bs), activation_from_name(j.at("activation").get<std::string>()));
  if (j.value("frozen", false)) m.set_frozen(true);
  return m;
}

inline nlohmann::json snapshot_to_json(const MlpSnapshot& s) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& t : s) out.push_back(tensor_to_json(t));
  return out;
}

inline MlpSnapshot snapshot_from_json(const nlohmann::json& j) {
  MlpSnapshot out;
  for (const auto& t : j) out.push_back(tensor_from_json(t));
  return out;
}

inline nlohmann::json stage1_to_json(const Stage1Model& m, const std::string& config_hash) {
  return nlohmann::json{{"format", "tspf-checkpoint"},
                        {"stage", "stage1"},
                        {"config_hash", config_hash},
                        {"d", m.d},
                        {"modules",
                         {{"phi", mlp_to_json(m.phi)},
                          {"psi", mlp_to_json(m.psi)},
                          {"h0", mlp_to_json(m.h0)},
                          {"h1", mlp_to_json(m.h1)}}}};
}

inline Stage1Model stage1_from_json(const nlohmann::json& j) {
  if (j.value("stage", "") != "stage1")
    throw std::runtime_error("stage1_from_json: not a stage-1 checkpoint");
  Stage1Model m;
  const auto& mods = j.at("modules");
  m.phi = mlp_from_json(mods.at("phi"));
  m.psi = mlp_from_json(mods.at("psi"));
  m.h0 = mlp_from_json(mods.at("h0"));
  m.h1 = mlp_from_json(mods.at("h1"));
  m.d = j.at("d").get<std::size_t>();
  return m;
}

inline nlohmann::json stage2_to_json(const Stage2Model& m, const std::string& config_hash) {
  return nlohmann::json{{"format", "tspf-checkpoint"},
                        {"stage", "stage2"},
                        {"config_hash", config_hash},
                        {"d", m.d},
                        {"modules",
                         {{"phi", mlp_to_json(m.phi)},
                          {"phi_u", mlp_to_json(m.phi_u)},
                          {"g0", mlp_to_json(m.g0)},
                          {"g1", mlp_to_json(m.g1)},
                          {"q_mean", mlp_to_json(m.q_net.mean_net)},
                          {"q_logvar", mlp_to_json(m.q_net.logvar_net)}}},
                        {"init_snapshot",
                         {{"g0", snapshot_to_json(m.g0_init)},
                          {"g1", snapshot_to_json(m.g1_init)}}}};
}

inline Stage2Model stage2_from_json(const nlohmann::json& j) {
  if (j.value("stage", "") != "stage2")
    throw std::runtime_error("stage2_from_json: not a stage-2 checkpoint");
  Stage2Model m;
  const auto& mods = j.at("modules");
  m.phi = mlp_from_json(mods.at("phi"));
  m.phi.set_frozen(true);
  m.phi_u = mlp_from_json(mods.at("phi_u"));
  m.g0 = mlp_from_json(mods.at("g0"));
  m.g1 = mlp_from_json(mods.at("g1"));
  m.q_net = VariationalCond(mlp_from_json(mods.at("q_mean")), mlp_from_json(mods.at("q_logvar")));
  m.g0_init = snapshot_from_json(j.at("init_snapshot").at("g0"));
  m.g1_init = snapshot_from_json(j.at("init_snapshot").at("g1"));
  m.d = j.at("d").get<std::size_t>();
  return m;
}

inline nlohmann::json baseline_to_json(const BaselineModel& m, const std::string& config_hash) {
  nlohmann::json j{{"format", "tspf-checkpoint"},
                   {"stage", baseline_name(m.kind)},
                   {"config_hash", config_hash}};
  if (m.kind == BaselineKind::kStage1Only) {
    j["modules"] = stage1_to_json(m.s1, config_hash)["modules"];
    j["d"] = m.s1.d;
  } else {
    nlohmann::json nets = nlohmann::json::array();
    for (const auto& net : m.nets) nets.push_back(mlp_to_json(net));
    j["nets"] = nets;
  }
  return j;
}

inline void save_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

inline nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in);
}

}  // namespace tspf
