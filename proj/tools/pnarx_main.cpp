// pnarx: batch pipeline for identifying polynomial NARX models and reducing
// them to decoupled form. Subcommands cover data generation, model fitting,
// tensor-based decoupling, fine-tuning, evaluation, and the (r, lambda) scan.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pnarx/lab.hpp"
#include "pnarx/model_io.hpp"

namespace {

using pnarx::Json;

void error_json(const std::string& kind, const std::string& message) {
    Json j{{"error", kind}, {"message", message}};
    std::cerr << j.dump() << "\n";
}

std::vector<double> parse_double_list(const std::string& text) {
    std::vector<double> out;
    std::size_t at = 0;
    while (at < text.size()) {
        std::size_t comma = text.find(',', at);
        if (comma == std::string::npos) comma = text.size();
        const std::string tok = text.substr(at, comma - at);
        char* end = nullptr;
        const double v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0')
            throw pnarx::ParseError("bad number in list: '" + tok + "'");
        out.push_back(v);
        at = comma + 1;
    }
    if (out.empty()) throw pnarx::ParseError("empty list");
    return out;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    for (double v : parse_double_list(text)) out.push_back(static_cast<int>(v));
    return out;
}

std::string best_csv_path(const std::string& path) {
    const auto dot = path.rfind('.');
    if (dot == std::string::npos) return path + "_best";
    return path.substr(0, dot) + "_best" + path.substr(dot);
}

int cmd_generate(const std::string& config_path, const std::string& out_dir,
                 std::uint64_t seed_override, bool have_seed) {
    pnarx::LabConfig cfg;
    if (!config_path.empty()) cfg = pnarx::lab_config_from_json(pnarx::read_json_file(config_path));
    if (have_seed) cfg.seed = seed_override;

    const auto data = pnarx::generate_lab_data(cfg);
    const std::string manifest = pnarx::write_lab_dataset(data, cfg, out_dir);

    Json summary;
    summary["manifest"] = manifest;
    summary["training_records"] = data.training.size();
    summary["samples_per_record"] = cfg.period;
    summary["validation_samples"] = data.validation.u.size();
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_fit(const std::string& data_path, int n_u, int n_y, int degree,
            const std::string& out_path, const std::string& report_path) {
    const auto ds = pnarx::load_lab_dataset(data_path);
    const pnarx::NarxStructure s{n_u, n_y, degree};
    pnarx::PnarxFitInfo info;
    const auto model = pnarx::fit_pnarx_records(ds.training, s, &info);
    pnarx::write_json_file(pnarx::model_to_json(model), out_path);

    Json report;
    report["parameters"] = model.parameter_count();
    report["condition"] = info.condition;
    report["rank_deficient"] = info.rank_deficient;
    try {
        report["e_rms_train"] = pnarx::records_e_rms(model, ds.training);
    } catch (const pnarx::Diverged&) {
        report["e_rms_train"] = nullptr;
    }
    try {
        report["e_rms_val"] = pnarx::record_e_rms(model, ds.validation);
    } catch (const pnarx::Diverged&) {
        report["e_rms_val"] = nullptr;
    }
    if (report_path.empty())
        std::cout << report.dump(2) << "\n";
    else
        pnarx::write_json_file(report, report_path);
    return 0;
}

int cmd_decouple(const std::string& model_path, const std::string& data_path,
                 const std::string& method, int r, double lambda, std::size_t n_points,
                 std::uint64_t seed, bool finetune, int max_sweeps, const std::string& out_path,
                 const std::string& diag_path) {
    const auto any = pnarx::model_from_json(pnarx::read_json_file(model_path));
    if (any.type != "pnarx")
        throw pnarx::ParseError("decouple expects a pnarx reference model");
    const auto& reference = any.pnarx;
    const auto ds = pnarx::load_lab_dataset(data_path);

    const auto ops =
        pnarx::sample_operating_points_records(reference, ds.training, n_points, seed);

    pnarx::DecoupledNarxModel model;
    Json diag;
    if (method == "fcpd") {
        const auto jt = pnarx::build_jacobian_tensor(reference.f, ops.points);
        pnarx::FcpdConfig cfg;
        cfg.r = r;
        cfg.lambda = lambda;
        cfg.seed = seed;
        cfg.max_sweeps = max_sweeps;
        pnarx::FcpdDiagnostics fd;
        const auto factors = pnarx::fcpd_decompose(jt, ops.points, cfg, &fd);
        model = pnarx::parameterize(factors, ops.points, reference.f, reference.structure,
                                    reference.structure.degree);
        diag = pnarx::diagnostics_to_json("fcpd", r, lambda, seed, fd,
                                          pnarx::e_f(reference.f, model, ops.points));
    } else if (method == "hessian") {
        pnarx::HessianPipelineOptions opts;
        opts.r = r;
        opts.degree = reference.structure.degree;
        opts.seed = seed;
        opts.finetune = false;
        pnarx::HessianPipelineInfo info;
        model = pnarx::hessian_pipeline(reference.f, ops.points,
                                        std::span<const pnarx::SignalRecord>(), reference.structure,
                                        opts, &info);
        pnarx::FcpdDiagnostics fd;
        fd.sweeps = info.fit.iterations;
        fd.objective_trace = {info.fit.objective};
        fd.tensor_residual = std::sqrt(info.fit.objective);
        diag = pnarx::diagnostics_to_json("hessian", r, lambda, seed, fd,
                                          pnarx::e_f(reference.f, model, ops.points));
    } else {
        throw pnarx::ParseError("unknown method '" + method + "' (expected fcpd or hessian)");
    }

    if (finetune) {
        const auto tuned =
            pnarx::finetune_sim(model, std::span<const pnarx::SignalRecord>(ds.training));
        model = tuned.model;
        diag["finetune"] = pnarx::finetune_trace_to_json(tuned);
        diag["e_rms_val_post"] = pnarx::record_e_rms(model, ds.validation);
    }
    pnarx::write_json_file(pnarx::model_to_json(model), out_path);
    if (!diag_path.empty()) pnarx::write_json_file(diag, diag_path);
    std::cout << Json{{"model", out_path}, {"e_f", diag["e_f"]}}.dump(2) << "\n";
    return 0;
}

int cmd_scan(const std::string& model_path, const std::string& data_path, const std::string& r_set,
             const std::string& lambda_set, std::size_t n_points, std::uint64_t seed, int jobs,
             const std::string& out_path) {
    const auto any = pnarx::model_from_json(pnarx::read_json_file(model_path));
    if (any.type != "pnarx") throw pnarx::ParseError("scan expects a pnarx reference model");
    const auto ds = pnarx::load_lab_dataset(data_path);

    pnarx::ScanOptions opts;
    opts.r_set = parse_int_list(r_set);
    opts.lambda_set = parse_double_list(lambda_set);
    opts.n_points = n_points;
    opts.seed = seed;
    opts.jobs = jobs;
    if (opts.r_set.empty() || opts.lambda_set.empty())
        throw pnarx::ParseError("scan grids must be non-empty");

    const auto cells = pnarx::scan_grid(any.pnarx, ds.training, ds.validation, opts);

    std::ofstream out(out_path);
    if (!out) throw pnarx::ParseError("cannot open for writing: " + out_path);
    out << pnarx::scan_csv_header() << "\n";
    for (const auto& c : cells) out << pnarx::scan_cell_csv(c) << "\n";
    out.close();

    const auto best = pnarx::scan_best_per_r(cells);
    std::ofstream bests(best_csv_path(out_path));
    bests << pnarx::scan_csv_header() << "\n";
    for (std::size_t idx : best) bests << pnarx::scan_cell_csv(cells[idx]) << "\n";
    bests.close();

    Json summary;
    summary["cells"] = cells.size();
    Json per_r = Json::array();
    for (std::size_t idx : best)
        per_r.push_back(Json{{"r", cells[idx].r},
                             {"lambda", cells[idx].lambda},
                             {"e_f", cells[idx].e_f},
                             {"e_rms_val_post", cells[idx].e_rms_val_post}});
    summary["best_per_r"] = per_r;
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& data_path,
                 const std::string& per_sample_path) {
    const auto any = pnarx::model_from_json(pnarx::read_json_file(model_path));
    const auto ds = pnarx::load_lab_dataset(data_path);

    Json metrics;
    metrics["type"] = any.type;
    metrics["parameters"] = any.parameter_count();
    const auto with_model = [&](const auto& model) {
        metrics["e_rms_train"] = pnarx::records_e_rms(model, ds.training);
        metrics["e_rms_val"] = pnarx::record_e_rms(model, ds.validation);
        if (!per_sample_path.empty()) {
            const int t0 = model.structure.max_lag();
            const std::vector<double> y_init(ds.validation.y.begin(), ds.validation.y.begin() + t0);
            const auto ys = pnarx::simulate(model, ds.validation.u, y_init);
            std::ofstream out(per_sample_path);
            if (!out) throw pnarx::ParseError("cannot open for writing: " + per_sample_path);
            out << "t,y,y_s,error\n";
            char buf[160];
            for (std::size_t t = static_cast<std::size_t>(t0); t < ys.size(); ++t) {
                std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", t, ds.validation.y[t],
                              ys[t], ds.validation.y[t] - ys[t]);
                out << buf;
            }
        }
    };
    if (any.type == "pnarx")
        with_model(any.pnarx);
    else
        with_model(any.decoupled);
    std::cout << metrics.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"polynomial NARX identification and tensor-based decoupling"};
    app.require_subcommand(1);

    // generate-data
    std::string gen_config, gen_out;
    std::uint64_t gen_seed = 0;
    auto* gen = app.add_subcommand("generate-data", "synthesize training/validation records");
    gen->add_option("--config", gen_config, "generator config JSON");
    gen->add_option("--out", gen_out, "output directory")->required();
    auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "override the config seed");

    // fit-pnarx
    std::string fit_data, fit_out, fit_report;
    int fit_nu = 1, fit_ny = 3, fit_degree = 3;
    auto* fit = app.add_subcommand("fit-pnarx", "equation-error fit of a polynomial NARX model");
    fit->add_option("--data", fit_data, "dataset manifest.json")->required();
    fit->add_option("--n-u", fit_nu, "input lags");
    fit->add_option("--n-y", fit_ny, "output lags");
    fit->add_option("--degree", fit_degree, "polynomial degree");
    fit->add_option("--out", fit_out, "model JSON output")->required();
    fit->add_option("--report", fit_report, "fit report JSON (stdout when omitted)");

    // decouple
    std::string dec_model, dec_data, dec_method = "fcpd", dec_out, dec_diag;
    int dec_r = 4, dec_sweeps = 150;
    double dec_lambda = 1.0;
    std::size_t dec_npoints = 200;
    std::uint64_t dec_seed = 1;
    bool dec_finetune = false;
    auto* dec = app.add_subcommand("decouple", "reduce a pnarx model to decoupled form");
    dec->add_option("--model", dec_model, "reference pnarx model JSON")->required();
    dec->add_option("--data", dec_data, "dataset manifest.json")->required();
    dec->add_option("--method", dec_method, "fcpd | hessian");
    dec->add_option("--r", dec_r, "number of branches");
    dec->add_option("--lambda", dec_lambda, "smoothness weight (fcpd)");
    dec->add_option("--n-points", dec_npoints, "operating points");
    dec->add_option("--seed", dec_seed, "random seed");
    dec->add_option("--max-sweeps", dec_sweeps, "ALS sweep cap (fcpd)");
    dec->add_flag("--finetune", dec_finetune, "run output-error fine-tuning");
    dec->add_option("--out", dec_out, "decoupled model JSON output")->required();
    dec->add_option("--diagnostics", dec_diag, "diagnostics JSON output");

    // scan
    std::string scan_model, scan_data, scan_out;
    std::string scan_r = "1,2,3,4,5,6";
    std::string scan_lambda = "1e-1,1e0,1e1,1e2,1e3,1e4,1e5";
    std::size_t scan_npoints = 200;
    std::uint64_t scan_seed = 1;
    int scan_jobs = 0;
    auto* scan = app.add_subcommand("scan", "decouple + fine-tune over an (r, lambda) grid");
    scan->add_option("--model", scan_model, "reference pnarx model JSON")->required();
    scan->add_option("--data", scan_data, "dataset manifest.json")->required();
    scan->add_option("--r-set", scan_r, "comma-separated branch counts");
    scan->add_option("--lambda-set", scan_lambda, "comma-separated smoothness weights");
    scan->add_option("--n-points", scan_npoints, "operating points");
    scan->add_option("--seed", scan_seed, "random seed");
    scan->add_option("--jobs", scan_jobs, "concurrent cells (0: all cores)");
    scan->add_option("--out", scan_out, "scan CSV output")->required();

    // evaluate
    std::string eval_model, eval_data, eval_per_sample;
    auto* eval = app.add_subcommand("evaluate", "free-run metrics of a model on a dataset");
    eval->add_option("--model", eval_model, "model JSON")->required();
    eval->add_option("--data", eval_data, "dataset manifest.json")->required();
    eval->add_option("--per-sample", eval_per_sample, "per-sample validation error CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        error_json("config", e.what());
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_generate(gen_config, gen_out, gen_seed, gen_seed_opt->count() > 0);
        if (fit->parsed()) return cmd_fit(fit_data, fit_nu, fit_ny, fit_degree, fit_out, fit_report);
        if (dec->parsed())
            return cmd_decouple(dec_model, dec_data, dec_method, dec_r, dec_lambda, dec_npoints,
                                dec_seed, dec_finetune, dec_sweeps, dec_out, dec_diag);
        if (scan->parsed())
            return cmd_scan(scan_model, scan_data, scan_r, scan_lambda, scan_npoints, scan_seed,
                            scan_jobs, scan_out);
        if (eval->parsed()) return cmd_evaluate(eval_model, eval_data, eval_per_sample);
    } catch (const pnarx::Diverged& e) {
        error_json("diverged", e.what());
        return 3;
    } catch (const pnarx::NonFinite& e) {
        error_json("non_finite", e.what());
        return 3;
    } catch (const pnarx::RankDeficient& e) {
        error_json("rank_deficient", e.what());
        return 3;
    } catch (const pnarx::DegenerateGrid& e) {
        error_json("degenerate_grid", e.what());
        return 3;
    } catch (const pnarx::ZeroReference& e) {
        error_json("zero_reference", e.what());
        return 3;
    } catch (const pnarx::ZeroSignal& e) {
        error_json("zero_signal", e.what());
        return 3;
    } catch (const pnarx::Error& e) {
        error_json("config", e.what());
        return 2;
    } catch (const std::exception& e) {
        error_json("internal", e.what());
        return 3;
    }
    return 0;
}
