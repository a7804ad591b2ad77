#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "pnarx/fcpd.hpp"
#include "pnarx/finetune.hpp"
#include "pnarx/narx.hpp"

namespace pnarx {

using Json = nlohmann::ordered_json;

namespace io_detail {

inline Json require(const Json& j, const char* key) {
    if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'");
    return j.at(key);
}

} // namespace io_detail

inline Json structure_to_json(const NarxStructure& s) {
    return Json{{"n_u", s.n_u}, {"n_y", s.n_y}, {"d", s.degree}};
}

inline NarxStructure structure_from_json(const Json& j) {
    NarxStructure s;
    s.n_u = io_detail::require(j, "n_u").get<int>();
    s.n_y = io_detail::require(j, "n_y").get<int>();
    s.degree = io_detail::require(j, "d").get<int>();
    if (s.n_u < 0 || s.n_y < 1 || s.degree < 1)
        throw ParseError("structure: n_u >= 0, n_y >= 1, d >= 1 required");
    return s;
}

//! {type:"pnarx", structure:{...}, coeffs:{n_vars, degree, include_constant, coeffs:[...]}}
inline Json model_to_json(const PNarxModel& m) {
    Json j;
    j["type"] = "pnarx";
    j["structure"] = structure_to_json(m.structure);
    j["coeffs"] = Json{{"n_vars", m.f.basis.n_vars},
                       {"degree", m.f.basis.degree},
                       {"include_constant", m.f.basis.include_constant},
                       {"coeffs", m.f.coeffs}};
    return j;
}

//! {type:"decoupled", structure:{...}, V:[[...]...], branches:[{degree, coeffs}...]}
inline Json model_to_json(const DecoupledNarxModel& m) {
    Json j;
    j["type"] = "decoupled";
    j["structure"] = structure_to_json(m.structure);
    Json v = Json::array();
    for (std::size_t k = 0; k < m.v.rows(); ++k) {
        Json row = Json::array();
        for (std::size_t i = 0; i < m.v.cols(); ++i) row.push_back(m.v(k, i));
        v.push_back(row);
    }
    j["V"] = v;
    Json branches = Json::array();
    for (const auto& g : m.branches)
        branches.push_back(Json{{"degree", g.degree()}, {"coeffs", g.coeffs}});
    j["branches"] = branches;
    return j;
}

inline PNarxModel pnarx_from_json(const Json& j) {
    const NarxStructure s = structure_from_json(io_detail::require(j, "structure"));
    const Json c = io_detail::require(j, "coeffs");
    const int n_vars = io_detail::require(c, "n_vars").get<int>();
    const int degree = io_detail::require(c, "degree").get<int>();
    const bool with_const = io_detail::require(c, "include_constant").get<bool>();
    if (n_vars != s.regressor_dim())
        throw ParseError("pnarx model: n_vars does not match the lag structure");
    MonomialBasis basis = basis_enumerate(n_vars, degree, with_const);
    auto coeffs = io_detail::require(c, "coeffs").get<std::vector<double>>();
    if (coeffs.size() != basis.size())
        throw ParseError("pnarx model: coefficient count does not match the basis");
    return PNarxModel{s, MultiPoly(std::move(basis), std::move(coeffs))};
}

inline DecoupledNarxModel decoupled_from_json(const Json& j) {
    DecoupledNarxModel m;
    m.structure = structure_from_json(io_detail::require(j, "structure"));
    const auto v = io_detail::require(j, "V");
    if (!v.is_array() || v.empty()) throw ParseError("decoupled model: V must be a non-empty array");
    const std::size_t n = v.size(), r = v.front().size();
    if (n != static_cast<std::size_t>(m.structure.regressor_dim()))
        throw ParseError("decoupled model: V rows do not match the lag structure");
    m.v = Matrix(n, r);
    for (std::size_t k = 0; k < n; ++k) {
        if (v.at(k).size() != r) throw ParseError("decoupled model: ragged V");
        for (std::size_t i = 0; i < r; ++i) m.v(k, i) = v.at(k).at(i).get<double>();
    }
    for (const auto& b : io_detail::require(j, "branches")) {
        auto coeffs = io_detail::require(b, "coeffs").get<std::vector<double>>();
        m.branches.emplace_back(std::move(coeffs));
    }
    if (m.branches.size() != r) throw ParseError("decoupled model: branch count does not match V");
    return m;
}

//! Either model kind, dispatched on the "type" field.
struct AnyModel {
    std::string type; // "pnarx" | "decoupled"
    PNarxModel pnarx;
    DecoupledNarxModel decoupled;

    const NarxStructure& structure() const {
        return type == "pnarx" ? pnarx.structure : decoupled.structure;
    }
    double eval(std::span<const double> x) const {
        return type == "pnarx" ? pnarx.eval(x) : decoupled.eval(x);
    }
    std::size_t parameter_count() const {
        return type == "pnarx" ? pnarx.parameter_count() : decoupled.parameter_count();
    }
};

inline AnyModel model_from_json(const Json& j) {
    AnyModel m;
    m.type = io_detail::require(j, "type").get<std::string>();
    if (m.type == "pnarx")
        m.pnarx = pnarx_from_json(j);
    else if (m.type == "decoupled")
        m.decoupled = decoupled_from_json(j);
    else
        throw ParseError("model: unknown type '" + m.type + "'");
    return m;
}

inline void write_json_file(const Json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

inline Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open: " + path);
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("bad json in ") + path + ": " + e.what());
    }
}

inline Json diagnostics_to_json(const std::string& method, int r, double lambda,
                                std::uint64_t seed, const FcpdDiagnostics& d, double e_f_value) {
    Json j;
    j["method"] = method;
    j["r"] = r;
    j["lambda"] = lambda;
    j["seed"] = seed;
    j["sweeps"] = d.sweeps;
    j["objective_trace"] = d.objective_trace;
    j["tensor_residual"] = d.tensor_residual;
    j["e_f"] = e_f_value;
    return j;
}

inline Json finetune_trace_to_json(const FinetuneResult& r) {
    Json arr = Json::array();
    for (const auto& pt : r.trace)
        arr.push_back(Json{{"iter", pt.iter}, {"sse", pt.sse}, {"mu", pt.mu}, {"accepted", pt.accepted}});
    return Json{{"status", r.status == LmStatus::converged     ? "converged"
                           : r.status == LmStatus::no_progress ? "no_progress"
                                                               : "max_iters"},
                {"initial_sse", r.initial_sse},
                {"final_sse", r.final_sse},
                {"accepted_steps", r.accepted_steps},
                {"trace", arr}};
}

} // namespace pnarx
