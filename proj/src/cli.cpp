#include "pnc/cli.hpp"

#include "pnc/bench_data.hpp"
#include "pnc/diagnostics.hpp"
#include "pnc/ensemble_eval.hpp"
#include "pnc/model_io.hpp"
#include "pnc/verify.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <sstream>

namespace pnc {

std::string csv_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return std::string(buf);
}

Index select_min_nll(const std::vector<double>& validation_nlls) {
    Index best = -1;
    double best_val = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < validation_nlls.size(); ++i) {
        const double v = validation_nlls[i];
        if (std::isfinite(v) && v < best_val) {
            best_val = v;
            best = static_cast<Index>(i);
        }
    }
    return best;
}

namespace {

constexpr auto kTakeLast = CLI::MultiOptionPolicy::TakeLast;

std::vector<double> parse_double_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stod(item));
    if (out.empty()) throw InvalidConfig("empty numeric list");
    return out;
}

std::vector<Index> parse_index_list(const std::string& text) {
    std::vector<Index> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(static_cast<Index>(std::stoll(item)));
    if (out.empty()) throw InvalidConfig("empty index list");
    return out;
}

// Config-file values become leading argv entries; flags parsed later override
// them (TakeLast policy on every option).
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    std::string config_path;
    for (std::size_t i = 0; i + 1 < args.size(); ++i)
        if (args[i] == "--config") config_path = args[i + 1];
    if (config_path.empty()) return args;

    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(config_path));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("config file: ") + e.what());
    }
    if (!doc.is_object()) throw InvalidConfig("config file must be a JSON object");

    std::vector<std::string> expanded;
    expanded.push_back(args[0]);
    for (const auto& [key, value] : doc.items()) {
        if (value.is_boolean()) {
            if (value.get<bool>()) expanded.push_back("--" + key);
            continue;
        }
        expanded.push_back("--" + key);
        expanded.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
    expanded.insert(expanded.end(), args.begin() + 1, args.end());
    return expanded;
}

void parse_args(CLI::App& app, const std::vector<std::string>& args) {
    std::vector<std::string> rest(args.begin() + 1, args.end());
    std::reverse(rest.begin(), rest.end());
    app.parse(rest);
}

void write_csv(const std::string& path, const nlohmann::json& effective_config,
               const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::string out = "# " + effective_config.dump() + "\n";
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i) out += ',';
        out += header[i];
    }
    out += '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += row[i];
        }
        out += '\n';
    }
    write_file(path, out);
}

// ---------------------------------------------------------------- train ----

struct TrainArgs {
    std::string config_path, data_path, out_path, data_out;
    bool generate = false;
    std::uint64_t gen_seed = 7, seed = 0;
    Index train_size = 4000, val_size = 1000, eval_size = 1000;
    std::string hidden = "200,200,200,200", activation = "relu";
    Index steps = 5000, batch = 64;
    double lr = 1e-3;
};

ShiftedDataset resolve_dataset(const std::string& data_path, bool generate,
                               std::uint64_t gen_seed, Index train_size, Index val_size,
                               Index eval_size) {
    if (generate) {
        BenchConfig cfg;
        cfg.train_size = train_size;
        cfg.val_size = val_size;
        cfg.eval_size = eval_size;
        return generate_benchmark(cfg, gen_seed);
    }
    if (data_path.empty()) throw InvalidConfig("either --data or --generate is required");
    return load_dataset(data_path);
}

int cmd_train(const std::vector<std::string>& args) {
    TrainArgs a;
    CLI::App app{"pnc train"};
    app.add_option("--config", a.config_path)->multi_option_policy(kTakeLast);
    app.add_option("--data", a.data_path)->multi_option_policy(kTakeLast);
    app.add_flag("--generate", a.generate);
    app.add_option("--gen-seed", a.gen_seed)->multi_option_policy(kTakeLast);
    app.add_option("--train-size", a.train_size)->multi_option_policy(kTakeLast);
    app.add_option("--val-size", a.val_size)->multi_option_policy(kTakeLast);
    app.add_option("--eval-size", a.eval_size)->multi_option_policy(kTakeLast);
    app.add_option("--hidden", a.hidden)->multi_option_policy(kTakeLast);
    app.add_option("--activation", a.activation)->multi_option_policy(kTakeLast);
    app.add_option("--steps", a.steps)->multi_option_policy(kTakeLast);
    app.add_option("--batch", a.batch)->multi_option_policy(kTakeLast);
    app.add_option("--lr", a.lr)->multi_option_policy(kTakeLast);
    app.add_option("--seed", a.seed)->multi_option_policy(kTakeLast);
    app.add_option("--out", a.out_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--data-out", a.data_out)->multi_option_policy(kTakeLast);
    parse_args(app, args);

    const ShiftedDataset ds = resolve_dataset(a.data_path, a.generate, a.gen_seed, a.train_size,
                                              a.val_size, a.eval_size);
    if (!a.data_out.empty()) save_dataset(ds, a.data_out);

    TrainConfig cfg;
    cfg.hidden_widths = parse_index_list(a.hidden);
    cfg.activation = activation_from_name(a.activation);
    cfg.steps = a.steps;
    cfg.batch_size = a.batch;
    cfg.learning_rate = a.lr;
    const MlpModel model = train_mlp(ds.train.inputs, ds.train.targets, cfg, a.seed);
    save_model(model, a.out_path);

    const double train_rmse = rmse(forward_batch(model, ds.train.inputs), ds.train.targets);
    const double val_rmse = rmse(forward_batch(model, ds.val.inputs), ds.val.targets);
    const Vector target_mean = ds.val.targets.colwise().mean().transpose();
    const double baseline =
        std::sqrt((ds.val.targets.rowwise() - target_mean.transpose()).squaredNorm() /
                  static_cast<double>(ds.val.targets.size()));
    std::cout << "train_rmse=" << csv_double(train_rmse) << " val_rmse=" << csv_double(val_rmse)
              << " constant_baseline_rmse=" << csv_double(baseline) << "\n"
              << "model " << a.out_path << " (hash " << model_content_hash(model) << ")\n";
    return 0;
}

// Batched rho over points for one single-layer member.
Vector member_rho_batch_impl(const PncEnsemble& ensemble, Index m,
                             const Eigen::Ref<const Matrix>& points,
                             const BatchTrace& base_trace) {
    const Index l = ensemble.config().target_layers.front();
    const MlpModel& base = ensemble.base();
    const MemberRepair& repair = ensemble.member(m).repairs.front();
    const Matrix delta = ensemble.member_delta_w(m, 0);
    const BatchTrace pert = perturbed_forward_batch(base, l, delta, points);

    const Matrix& h_base = base_trace.per_layer_post[static_cast<std::size_t>(l)];
    const Matrix& h_pert = pert.per_layer_post[static_cast<std::size_t>(l)];
    const auto& next = base.layer(l + 1);

    Matrix out_pert = h_pert * repair.corrected_theta.rightCols(h_pert.cols()).transpose();
    out_pert.rowwise() += repair.corrected_theta.col(0).transpose();
    Matrix out_base = h_base * next.weight.transpose();
    out_base.rowwise() += next.bias.transpose();
    return (out_pert - out_base).rowwise().norm();
}

// ---------------------------------------------------------------- build ----

struct BuildArgs {
    std::string config_path, model_path, data_path, out_path;
    std::string layers = "1", calibration = "train";
    Index ensemble_size = 50, rank = 20;
    double sigma = 16.0, ridge = 1e-2;
    double bootstrap_frac = -1.0;  // unset
    std::uint64_t seed = 0;
};

PncConfig to_pnc_config(const BuildArgs& a) {
    PncConfig cfg;
    cfg.target_layers = parse_index_list(a.layers);
    cfg.ensemble_size = a.ensemble_size;
    cfg.rank = a.rank;
    cfg.scale = a.sigma;
    cfg.ridge = a.ridge;
    if (a.bootstrap_frac >= 0.0) cfg.bootstrap_fraction = a.bootstrap_frac;
    cfg.seed = a.seed;
    return cfg;
}

void add_build_options(CLI::App& app, BuildArgs& a) {
    app.add_option("--config", a.config_path)->multi_option_policy(kTakeLast);
    app.add_option("--model", a.model_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--data", a.data_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--calibration", a.calibration)->multi_option_policy(kTakeLast);
    app.add_option("--layers", a.layers)->multi_option_policy(kTakeLast);
    app.add_option("--M", a.ensemble_size)->multi_option_policy(kTakeLast);
    app.add_option("--K", a.rank)->multi_option_policy(kTakeLast);
    app.add_option("--sigma", a.sigma)->multi_option_policy(kTakeLast);
    app.add_option("--lambda", a.ridge)->multi_option_policy(kTakeLast);
    app.add_option("--bootstrap-frac", a.bootstrap_frac)->multi_option_policy(kTakeLast);
    app.add_option("--seed", a.seed)->multi_option_policy(kTakeLast);
}

PncEnsemble build_from_args(const BuildArgs& a, const MlpModel& model,
                            const ShiftedDataset& ds) {
    const PncConfig cfg = to_pnc_config(a);
    const Matrix& calibration = ds.split(a.calibration).inputs;
    return cfg.target_layers.size() == 1 ? build_single_layer(model, calibration, cfg)
                                         : build_multi_layer(model, calibration, cfg);
}

int cmd_build(const std::vector<std::string>& args) {
    BuildArgs a;
    CLI::App app{"pnc build"};
    add_build_options(app, a);
    app.add_option("--out", a.out_path)->required()->multi_option_policy(kTakeLast);
    parse_args(app, args);

    const MlpModel model = load_model(a.model_path);
    const ShiftedDataset ds = load_dataset(a.data_path);
    if (a.sigma == 0.0)
        std::cout << "warning: sigma=0, every member equals the base model\n";
    const PncEnsemble ensemble = build_from_args(a, model, ds);
    save_ensemble(ensemble, a.out_path);
    std::cout << "members=" << ensemble.size()
              << " min_sigma_min_Gv=" << csv_double(ensemble.min_conditioning()) << "\n"
              << "ensemble " << a.out_path << "\n";
    return 0;
}

// -------------------------------------------------------------- diagnose ----

int cmd_diagnose(const std::vector<std::string>& args) {
    BuildArgs shared;  // reuse model/data/config plumbing
    std::string ensemble_path, out_path, json_path, splits = "id_eval,near,mid,far";
    Index max_points = 200, sketch_calib = 500, sketch_probes = 64;
    CLI::App app{"pnc diagnose"};
    app.add_option("--config", shared.config_path)->multi_option_policy(kTakeLast);
    app.add_option("--model", shared.model_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--data", shared.data_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--calibration", shared.calibration)->multi_option_policy(kTakeLast);
    app.add_option("--ensemble", ensemble_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--splits", splits)->multi_option_policy(kTakeLast);
    app.add_option("--max-points", max_points)->multi_option_policy(kTakeLast);
    app.add_option("--sketch-calib", sketch_calib)->multi_option_policy(kTakeLast);
    app.add_option("--sketch-probes", sketch_probes)->multi_option_policy(kTakeLast);
    app.add_option("--out", out_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--json-out", json_path)->multi_option_policy(kTakeLast);
    parse_args(app, args);

    const MlpModel model = load_model(shared.model_path);
    const ShiftedDataset ds = load_dataset(shared.data_path);
    const PncEnsemble ensemble = load_ensemble(ensemble_path, model);
    if (ensemble.config().target_layers.size() != 1)
        throw InvalidConfig("diagnose supports single-layer ensembles");
    const Index l = ensemble.config().target_layers.front();
    const double ridge = ensemble.config().ridge;
    const double sigma = ensemble.config().scale;

    const Matrix& calibration = ds.split(shared.calibration).inputs;
    const BatchTrace calib_trace = forward_batch_trace(model, calibration);
    const Matrix& calib_hidden = calib_trace.per_layer_post[static_cast<std::size_t>(l)];
    Matrix calib_design(calibration.rows(), model.hidden_dim(l) + 1);
    calib_design.col(0).setOnes();
    calib_design.rightCols(model.hidden_dim(l)) = calib_hidden;
    Matrix calib_gram = calib_design.transpose() * calib_design;
    calib_gram = 0.5 * (calib_gram + calib_gram.transpose());
    calib_gram.diagonal().array() += ridge;
    const Eigen::LLT<Matrix> calib_llt(calib_gram);
    if (calib_llt.info() != Eigen::Success)
        throw SingularSystem("diagnose: calibration design gram not positive definite");

    // Smaller calibration subset for the per-point sensitivity sketch.
    const Index n_sketch = std::min<Index>(sketch_calib, calibration.rows());
    const Matrix sketch_inputs = calibration.topRows(n_sketch);

    const Vector noise_floor =
        noise_floor_from_base(model, ds.val.inputs, ds.val.targets);

    nlohmann::json echo{{"command", "diagnose"},
                        {"model", shared.model_path},
                        {"ensemble", ensemble_path},
                        {"data", shared.data_path},
                        {"calibration", shared.calibration},
                        {"splits", splits},
                        {"max_points", max_points},
                        {"sketch_calib", n_sketch},
                        {"sketch_probes", sketch_probes}};

    std::vector<std::vector<std::string>> rows;
    std::vector<double> all_sketch, all_disagreement, all_mahalanobis;
    std::stringstream split_stream(splits);
    std::string split_name;
    while (std::getline(split_stream, split_name, ',')) {
        const SplitData& split = ds.split(split_name);
        const Index n = std::min<Index>(max_points, split.inputs.rows());
        if (n == 0) continue;
        const Matrix points = split.inputs.topRows(n);
        const BatchTrace point_trace = forward_batch_trace(model, points);
        const Matrix& point_hidden = point_trace.per_layer_post[static_cast<std::size_t>(l)];
        const BatchPrediction pred = predict_batch(ensemble, points, noise_floor);

        Matrix rho(n, ensemble.size());
        for (Index m = 0; m < ensemble.size(); ++m)
            rho.col(m) = member_rho_batch_impl(ensemble, m, points, point_trace);

        const SensitivityContext sens_ctx(model, l, ensemble.basis(0), sketch_inputs, ridge);
        const MahalanobisModel mahal_model = fit_mahalanobis(calib_hidden);
        for (Index i = 0; i < n; ++i) {
            Vector ybar(model.hidden_dim(l) + 1);
            ybar[0] = 1.0;
            ybar.tail(model.hidden_dim(l)) = point_hidden.row(i).transpose();
            const double leverage = ybar.dot(calib_llt.solve(ybar));
            const double mahal =
                mahalanobis_distance(mahal_model, point_hidden.row(i).transpose());

            const SensitivityReport sens = sens_ctx.at(points.row(i).transpose());
            double vhat = 0.0, eff_rank = 0.0;
            if (sens.sensitivity.norm() > 0.0 && sigma > 0.0) {
                const SketchReport sk = sketch_variance(
                    sens.sensitivity, sigma, sketch_probes,
                    mix_seed(ensemble.config().seed, 901, rows.size()));
                vhat = sk.estimate;
                eff_rank = sk.eff_rank;
            }

            rows.push_back({split_name, std::to_string(i), csv_double(leverage),
                            csv_double(mahal), csv_double(rho.row(i).mean()),
                            csv_double(rho.row(i).maxCoeff()), csv_double(vhat),
                            csv_double(eff_rank), csv_double(pred.disagreement[i])});
            all_sketch.push_back(vhat);
            all_disagreement.push_back(pred.disagreement[i]);
            all_mahalanobis.push_back(mahal);
        }
    }

    write_csv(out_path, echo,
              {"split", "point", "leverage", "mahalanobis", "rho_mean", "rho_max", "sketch_vhat",
               "eff_rank", "disagreement"},
              rows);

    nlohmann::json summary{{"points", rows.size()}};
    if (all_sketch.size() >= 2) {
        try {
            const double rho_sketch = spearman(all_sketch, all_disagreement);
            const double rho_mahal = spearman(all_mahalanobis, all_disagreement);
            summary["spearman_sketch_disagreement"] = rho_sketch;
            summary["spearman_mahalanobis_disagreement"] = rho_mahal;
            std::cout << "spearman(sketch, disagreement)=" << csv_double(rho_sketch) << "\n"
                      << "spearman(mahalanobis, disagreement)=" << csv_double(rho_mahal)
                      << "\n";
        } catch (const ZeroVariance&) {
            std::cout << "spearman undefined (constant scores)\n";
        }
    }
    if (!json_path.empty()) write_file(json_path, summary.dump(2) + "\n");
    std::cout << "report " << out_path << " (" << rows.size() << " rows)\n";
    return 0;
}

// ------------------------------------------------------------------ eval ----

int cmd_eval(const std::vector<std::string>& args) {
    BuildArgs shared;
    std::string ensemble_path, out_path, json_path;
    CLI::App app{"pnc eval"};
    app.add_option("--config", shared.config_path)->multi_option_policy(kTakeLast);
    app.add_option("--model", shared.model_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--data", shared.data_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--ensemble", ensemble_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--out", out_path)->required()->multi_option_policy(kTakeLast);
    app.add_option("--json-out", json_path)->multi_option_policy(kTakeLast);
    parse_args(app, args);

    const MlpModel model = load_model(shared.model_path);
    const ShiftedDataset ds = load_dataset(shared.data_path);
    const PncEnsemble ensemble = load_ensemble(ensemble_path, model);
    const Vector noise_floor = noise_floor_from_base(model, ds.val.inputs, ds.val.targets);

    const EvalReport report = evaluate_splits(
        ensemble, {"id_eval", ds.id_eval.inputs, ds.id_eval.targets},
        {{"near", ds.near.inputs, ds.near.targets},
         {"mid", ds.mid.inputs, ds.mid.targets},
         {"far", ds.far.inputs, ds.far.targets}},
        noise_floor);

    nlohmann::json echo{{"command", "eval"},
                        {"model", shared.model_path},
                        {"ensemble", ensemble_path},
                        {"data", shared.data_path}};
    std::vector<std::vector<std::string>> rows;
    for (const auto& s : report.splits) {
        rows.push_back({s.name, "rmse", csv_double(s.rmse)});
        rows.push_back({s.name, "nll", csv_double(s.nll)});
        if (s.auroc_vs_id) rows.push_back({s.name, "auroc_vs_id", csv_double(*s.auroc_vs_id)});
        if (s.spearman_unc_err)
            rows.push_back({s.name, "spearman_unc_err", csv_double(*s.spearman_unc_err)});
    }
    write_csv(out_path, echo, {"split", "metric", "value"}, rows);
    if (!json_path.empty()) {
        nlohmann::json splits = nlohmann::json::array();
        for (const auto& s : report.splits) {
            nlohmann::json js{{"name", s.name}, {"rmse", s.rmse}, {"nll", s.nll}};
            if (s.auroc_vs_id) js["auroc_vs_id"] = *s.auroc_vs_id;
            if (s.spearman_unc_err) js["spearman_unc_err"] = *s.spearman_unc_err;
            splits.push_back(std::move(js));
        }
        write_file(json_path, nlohmann::json{{"splits", std::move(splits)}}.dump(2) + "\n");
    }
    for (const auto& row : rows)
        std::cout << row[0] << " " << row[1] << "=" << row[2] << "\n";
    return 0;
}

// ---------------------------------------------------------------- verify ----

int cmd_verify(const std::vector<std::string>& args) {
    std::string suite = "all", out_path, json_path, config_path;
    std::uint64_t seed = 0;
    CLI::App app{"pnc verify"};
    app.add_option("--config", config_path)->multi_option_policy(kTakeLast);
    app.add_option("--suite", suite)->multi_option_policy(kTakeLast);
    app.add_option("--seed", seed)->multi_option_policy(kTakeLast);
    app.add_option("--out", out_path)->multi_option_policy(kTakeLast);
    app.add_option("--json-out", json_path)->multi_option_policy(kTakeLast);
    parse_args(app, args);

    const std::vector<CheckResult> results = run_verify_suite(suite, seed);
    bool all_pass = true;
    std::vector<std::vector<std::string>> rows;
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& r : results) {
        all_pass = all_pass && r.pass;
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " — " << r.detail << "\n";
        rows.push_back({r.name, r.pass ? "pass" : "fail", r.detail});
        checks.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    }
    if (!out_path.empty()) {
        nlohmann::json echo{{"command", "verify"}, {"suite", suite}, {"seed", seed}};
        write_csv(out_path, echo, {"check", "status", "detail"}, rows);
    }
    if (!json_path.empty()) {
        nlohmann::json summary{{"suite", suite},
                               {"seed", seed},
                               {"all_pass", all_pass},
                               {"checks", std::move(checks)}};
        write_file(json_path, summary.dump(2) + "\n");
    }
    std::cout << (all_pass ? "all checks passed" : "checks FAILED") << " (" << results.size()
              << " checks)\n";
    return all_pass ? 0 : 2;
}

// ----------------------------------------------------------------- sweep ----

int cmd_sweep(const std::vector<std::string>& args) {
    BuildArgs a;
    std::string out_path, sigmas = "8,16,32", fracs = "0.05,0.1,0.2,0.3",
                lambdas = "0.0001,0.01";
    CLI::App app{"pnc sweep"};
    add_build_options(app, a);
    app.add_option("--sigmas", sigmas)->multi_option_policy(kTakeLast);
    app.add_option("--fracs", fracs)->multi_option_policy(kTakeLast);
    app.add_option("--lambdas", lambdas)->multi_option_policy(kTakeLast);
    app.add_option("--out", out_path)->required()->multi_option_policy(kTakeLast);
    parse_args(app, args);

    const MlpModel model = load_model(a.model_path);
    const ShiftedDataset ds = load_dataset(a.data_path);
    const Vector noise_floor = noise_floor_from_base(model, ds.val.inputs, ds.val.targets);
    const Matrix& calibration = ds.split(a.calibration).inputs;

    struct Cell {
        double sigma, frac, ridge;
        double val_nll = std::numeric_limits<double>::quiet_NaN();
        std::string status = "ok";
    };
    std::vector<Cell> cells;
    for (const double s : parse_double_list(sigmas))
        for (const double f : parse_double_list(fracs))
            for (const double l : parse_double_list(lambdas)) cells.push_back({s, f, l});

    auto config_for = [&](double sigma, double frac, double ridge, Index m_override) {
        PncConfig cfg = to_pnc_config(a);
        cfg.scale = sigma;
        cfg.ridge = ridge;
        if (frac > 0.0) cfg.bootstrap_fraction = frac;
        else cfg.bootstrap_fraction.reset();
        if (m_override > 0) cfg.ensemble_size = m_override;
        return cfg;
    };
    auto build_cell = [&](const PncConfig& cfg) {
        return cfg.target_layers.size() == 1 ? build_single_layer(model, calibration, cfg)
                                             : build_multi_layer(model, calibration, cfg);
    };

    std::vector<double> val_nlls;
    for (auto& cell : cells) {
        try {
            const PncEnsemble ens = build_cell(config_for(cell.sigma, cell.frac, cell.ridge, 0));
            const BatchPrediction pred = predict_batch(ens, ds.val.inputs, noise_floor);
            cell.val_nll = mean_gaussian_nll(pred, ds.val.targets);
        } catch (const Error& e) {
            cell.status = std::string("failed: ") + e.what();
        }
        val_nlls.push_back(cell.val_nll);
        std::cout << "cell sigma=" << cell.sigma << " frac=" << cell.frac
                  << " lambda=" << cell.ridge << " val_nll=" << csv_double(cell.val_nll) << " "
                  << cell.status << "\n";
    }

    const Index winner = select_min_nll(val_nlls);
    if (winner < 0) throw SingularSystem("sweep: every grid cell failed");
    const Cell& w = cells[static_cast<std::size_t>(winner)];

    const PncEnsemble winner_ens = build_cell(config_for(w.sigma, w.frac, w.ridge, 0));
    const EvalReport winner_report = evaluate_splits(
        winner_ens, {"id_eval", ds.id_eval.inputs, ds.id_eval.targets},
        {{"near", ds.near.inputs, ds.near.targets},
         {"mid", ds.mid.inputs, ds.mid.targets},
         {"far", ds.far.inputs, ds.far.targets}},
        noise_floor);

    // sigma = 0 reference: every member equals the base model.
    const PncEnsemble baseline_ens = build_cell(config_for(0.0, -1.0, w.ridge, 1));
    const EvalReport baseline_report = evaluate_splits(
        baseline_ens, {"id_eval", ds.id_eval.inputs, ds.id_eval.targets},
        {{"near", ds.near.inputs, ds.near.targets},
         {"mid", ds.mid.inputs, ds.mid.targets},
         {"far", ds.far.inputs, ds.far.targets}},
        noise_floor);

    nlohmann::json echo{{"command", "sweep"}, {"model", a.model_path},
                        {"data", a.data_path},  {"layers", a.layers},
                        {"M", a.ensemble_size}, {"K", a.rank},
                        {"sigmas", sigmas},     {"fracs", fracs},
                        {"lambdas", lambdas},   {"seed", a.seed}};
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const Cell& c = cells[i];
        rows.push_back({"grid", csv_double(c.sigma), csv_double(c.frac), csv_double(c.ridge),
                        csv_double(c.val_nll),
                        static_cast<Index>(i) == winner ? "winner" : c.status});
    }
    auto push_report = [&rows](const std::string& tag, const EvalReport& report) {
        for (const auto& s : report.splits) {
            rows.push_back({tag + "/" + s.name + "/rmse", "", "", "", csv_double(s.rmse), ""});
            rows.push_back({tag + "/" + s.name + "/nll", "", "", "", csv_double(s.nll), ""});
            if (s.auroc_vs_id)
                rows.push_back(
                    {tag + "/" + s.name + "/auroc", "", "", "", csv_double(*s.auroc_vs_id), ""});
            if (s.spearman_unc_err)
                rows.push_back({tag + "/" + s.name + "/spearman", "", "", "",
                                csv_double(*s.spearman_unc_err), ""});
        }
    };
    push_report("winner", winner_report);
    push_report("baseline_sigma0", baseline_report);
    write_csv(out_path, echo, {"row", "sigma", "frac", "lambda", "value", "status"}, rows);

    std::cout << "winner sigma=" << w.sigma << " frac=" << w.frac << " lambda=" << w.ridge
              << " val_nll=" << csv_double(w.val_nll) << "\n";
    for (const auto& s : winner_report.splits)
        std::cout << "winner " << s.name << " rmse=" << csv_double(s.rmse)
                  << " nll=" << csv_double(s.nll) << "\n";
    return 0;
}

int dispatch(const std::vector<std::string>& raw_args) {
    if (raw_args.empty()) {
        std::cerr << "usage: pnc <train|build|diagnose|eval|verify|sweep> [options]\n";
        return 1;
    }
    const std::vector<std::string> args = expand_config(raw_args);
    const std::string& command = args[0];
    if (command == "train") return cmd_train(args);
    if (command == "build") return cmd_build(args);
    if (command == "diagnose") return cmd_diagnose(args);
    if (command == "eval") return cmd_eval(args);
    if (command == "verify") return cmd_verify(args);
    if (command == "sweep") return cmd_sweep(args);
    std::cerr << "unknown command: " << command << "\n";
    return 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    try {
        return dispatch(args);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return 0;  // --help
        }
        std::cerr << "argument error: " << e.what() << "\n";
        return 1;
    } catch (const SingularSystem& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const DivergedTraining& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const NoConvergence& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const NonFiniteValue& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const NonFiniteResult& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const DegenerateCovariance& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const RejectionStarvation& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace pnc
