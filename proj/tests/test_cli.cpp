#include "pnc/cli.hpp"

#include "pnc/bench_data.hpp"
#include "pnc/model_io.hpp"
#include "pnc/pnc.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

using namespace pnc;

namespace {

const std::string kDir = "/tmp/pnc_cli_test/";

struct Fixture {
    Fixture() {
        if (std::system(("mkdir -p " + kDir).c_str()) != 0)
            throw std::runtime_error("cannot create test directory");
        // Small but trainable benchmark shared across CLI cases.
        run({"train", "--generate", "--gen-seed", "5", "--train-size", "600", "--val-size",
             "150", "--eval-size", "150", "--hidden", "32,32", "--steps", "400", "--seed", "9",
             "--out", kDir + "model.json", "--data-out", kDir + "bench.bin"});
    }
    static int run(const std::vector<std::string>& args) { return run_cli(args); }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("select_min_nll argmin semantics") {
    CHECK(select_min_nll({3.0, 1.0, 2.0}) == 1);
    CHECK(select_min_nll({3.0}) == 0);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK(select_min_nll({nan, 2.0, 1.5}) == 2);
    CHECK(select_min_nll({nan, nan}) == -1);
    CHECK(select_min_nll({1.0, 1.0}) == 0);  // first wins ties
    // A zero-spread cell with higher NLL than a spread cell never wins.
    CHECK(select_min_nll({0.7, 0.9}) == 0);
}

TEST_CASE("train writes deterministic models and reports errors") {
    fixture();
    const int rc = Fixture::run({"train", "--generate", "--gen-seed", "5", "--train-size",
                                 "200", "--val-size", "50", "--eval-size", "50", "--hidden",
                                 "16", "--steps", "50", "--seed", "4", "--out",
                                 kDir + "m_a.json"});
    CHECK(rc == 0);
    const int rc2 = Fixture::run({"train", "--generate", "--gen-seed", "5", "--train-size",
                                  "200", "--val-size", "50", "--eval-size", "50", "--hidden",
                                  "16", "--steps", "50", "--seed", "4", "--out",
                                  kDir + "m_b.json"});
    CHECK(rc2 == 0);
    CHECK(read_file(kDir + "m_a.json") == read_file(kDir + "m_b.json"));

    // Zero steps writes the initialization and exits cleanly.
    CHECK(Fixture::run({"train", "--generate", "--gen-seed", "5", "--train-size", "100",
                        "--val-size", "50", "--eval-size", "50", "--hidden", "8", "--steps",
                        "0", "--out", kDir + "m_init.json"}) == 0);

    // Missing inputs are a validation error.
    CHECK(Fixture::run({"train", "--out", kDir + "nope.json"}) == 1);
    CHECK(Fixture::run({"bogus-command"}) == 1);
}

TEST_CASE("build validates layers and records bootstrap subsets") {
    fixture();
    CHECK(Fixture::run({"build", "--model", kDir + "model.json", "--data", kDir + "bench.bin",
                        "--layers", "0,1", "--M", "4", "--K", "4", "--sigma", "2",
                        "--out", kDir + "e_adj.json"}) == 1);  // adjacent layers

    CHECK(Fixture::run({"build", "--model", kDir + "model.json", "--data", kDir + "bench.bin",
                        "--layers", "1", "--M", "10", "--K", "4", "--sigma", "2",
                        "--bootstrap-frac", "0.05", "--seed", "3", "--out",
                        kDir + "e_boot.json"}) == 0);
    const MlpModel model = load_model(kDir + "model.json");
    const PncEnsemble ens = load_ensemble(kDir + "e_boot.json", model);
    REQUIRE(ens.size() == 10);
    std::set<std::vector<Index>> distinct;
    for (Index m = 0; m < ens.size(); ++m) {
        CHECK(ens.member(m).subset_ids.size() == 30);  // 0.05 * 600
        distinct.insert(ens.member(m).subset_ids);
    }
    CHECK(distinct.size() == 10);

    // sigma zero: warning but success.
    CHECK(Fixture::run({"build", "--model", kDir + "model.json", "--data", kDir + "bench.bin",
                        "--layers", "1", "--M", "2", "--K", "4", "--sigma", "0", "--out",
                        kDir + "e_zero.json"}) == 0);
}

TEST_CASE("eval and diagnose emit csv reports") {
    fixture();
    REQUIRE(Fixture::run({"build", "--model", kDir + "model.json", "--data", kDir + "bench.bin",
                          "--layers", "1", "--M", "8", "--K", "4", "--sigma", "4",
                          "--bootstrap-frac", "0.2", "--seed", "1", "--out",
                          kDir + "ens.json"}) == 0);
    CHECK(Fixture::run({"eval", "--model", kDir + "model.json", "--ensemble", kDir + "ens.json",
                        "--data", kDir + "bench.bin", "--out", kDir + "eval.csv"}) == 0);
    const std::string eval_csv = read_file(kDir + "eval.csv");
    CHECK(eval_csv.find("split,metric,value") != std::string::npos);
    CHECK(eval_csv.find("far,auroc_vs_id") != std::string::npos);
    CHECK(eval_csv.rfind("# {", 0) == 0);  // effective config echoed in header

    CHECK(Fixture::run({"diagnose", "--model", kDir + "model.json", "--ensemble",
                        kDir + "ens.json", "--data", kDir + "bench.bin", "--max-points", "20",
                        "--sketch-calib", "100", "--out", kDir + "diag.csv"}) == 0);
    const std::string diag_csv = read_file(kDir + "diag.csv");
    CHECK(diag_csv.find("split,point,leverage,mahalanobis,rho_mean,rho_max") !=
          std::string::npos);
    CHECK(diag_csv.find("id_eval,0,") != std::string::npos);

    // sigma-zero ensemble: rho columns must vanish.
    REQUIRE(Fixture::run({"build", "--model", kDir + "model.json", "--data", kDir + "bench.bin",
                          "--layers", "1", "--M", "3", "--K", "4", "--sigma", "0", "--seed",
                          "1", "--out", kDir + "ens0.json"}) == 0);
    CHECK(Fixture::run({"diagnose", "--model", kDir + "model.json", "--ensemble",
                        kDir + "ens0.json", "--data", kDir + "bench.bin", "--max-points", "10",
                        "--sketch-calib", "100", "--out", kDir + "diag0.csv"}) == 0);
    std::ifstream in(kDir + "diag0.csv");
    std::string line;
    std::getline(in, line);  // config echo
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        for (int c = 0; c <= 4 && std::getline(ss, cell, ','); ++c) {
            if (c == 4) CHECK(std::stod(cell) <= 1e-12);  // rho_mean column
        }
    }
}

TEST_CASE("diagnose on an empty split writes a header-only csv") {
    fixture();
    ShiftedDataset ds = load_dataset(kDir + "bench.bin");
    ds.id_eval.inputs = Matrix(0, 3);
    ds.id_eval.targets = Matrix(0, 2);
    save_dataset(ds, kDir + "bench_empty.bin");
    REQUIRE(Fixture::run({"build", "--model", kDir + "model.json", "--data",
                          kDir + "bench_empty.bin", "--layers", "1", "--M", "2", "--K", "4",
                          "--sigma", "2", "--out", kDir + "ens_empty.json"}) == 0);
    CHECK(Fixture::run({"diagnose", "--model", kDir + "model.json", "--ensemble",
                        kDir + "ens_empty.json", "--data", kDir + "bench_empty.bin",
                        "--splits", "id_eval", "--out", kDir + "diag_empty.csv"}) == 0);
    const std::string csv = read_file(kDir + "diag_empty.csv");
    // Echo line, header line, nothing else.
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("verify subcommand exit codes") {
    CHECK(Fixture::run({"verify", "--suite", "mixture"}) == 0);
    CHECK(Fixture::run({"verify", "--suite", "unknown-suite"}) == 1);
    CHECK(Fixture::run({"verify", "--suite", "lsq", "--out", kDir + "verify.csv"}) == 0);
    const std::string csv = read_file(kDir + "verify.csv");
    CHECK(csv.find("lsq/closed_form_vs_oracle,pass") != std::string::npos);
}

TEST_CASE("config file values are overridden by flags") {
    fixture();
    write_file(kDir + "cfg.json",
               R"({"model": ")" + kDir + R"(model.json", "data": ")" + kDir +
                   R"(bench.bin", "layers": "1", "M": 3, "K": 4, "sigma": 8.0, "seed": 2})");
    CHECK(Fixture::run({"build", "--config", kDir + "cfg.json", "--sigma", "2.5", "--out",
                        kDir + "ens_cfg.json"}) == 0);
    const MlpModel model = load_model(kDir + "model.json");
    const PncEnsemble ens = load_ensemble(kDir + "ens_cfg.json", model);
    CHECK(ens.config().scale == 2.5);  // flag beat the config file
    CHECK(ens.config().ensemble_size == 3);
    CHECK(ens.config().rank == 4);
}

TEST_CASE("sweep selects the only cell in a one-cell grid") {
    fixture();
    CHECK(Fixture::run({"sweep", "--model", kDir + "model.json", "--data", kDir + "bench.bin",
                        "--layers", "1", "--M", "6", "--K", "4", "--sigmas", "4", "--fracs",
                        "0.2", "--lambdas", "0.01", "--seed", "2", "--out",
                        kDir + "sweep.csv"}) == 0);
    const std::string csv = read_file(kDir + "sweep.csv");
    CHECK(csv.find("winner") != std::string::npos);
    CHECK(csv.find("winner/far/nll") != std::string::npos);
    CHECK(csv.find("baseline_sigma0/far/nll") != std::string::npos);
}
