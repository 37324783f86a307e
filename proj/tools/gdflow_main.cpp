// gdflow command line: synthesis, training, denoising, evaluation, filter
// response export, and numeric selftests. Exit codes: 0 success, 1 runtime
// failure, 2 usage or validation error. Machine output goes to stdout,
// diagnostics to stderr.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gdflow/gdflow.hpp"

namespace fs = std::filesystem;
using namespace gdflow;

namespace {

std::vector<double> parse_csv_doubles(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        char* end = nullptr;
        const double v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0')
            throw UsageError("cannot parse number '" + tok + "'");
        out.push_back(v);
    }
    if (out.empty()) throw UsageError("expected a comma separated list of numbers");
    return out;
}

CloudFormat format_for_path(const std::string& path, bool ply_binary) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    if (ext == "ply") return ply_binary ? CloudFormat::PlyBinary : CloudFormat::PlyAscii;
    return CloudFormat::Xyz;
}

std::vector<PointCloud> load_cloud_dir(const std::string& dir) {
    std::vector<std::string> files;
    if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir);
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string ext = entry.path().extension().string();
        if (ext == ".xyz" || ext == ".ply") files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw UsageError("no .xyz or .ply files in " + dir);
    std::vector<PointCloud> clouds;
    for (const auto& f : files) {
        clouds.push_back(load_cloud(f));
        clouds.back().name = fs::path(f).stem().string();
    }
    return clouds;
}

// ---------------------------------------------------------------------------
// selftest support

// Jacobi eigenvalue iteration for small symmetric matrices.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, int64_t n) {
    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
        if (off < 1e-24) break;
        for (int64_t p = 0; p < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::fabs(apq) < 1e-18) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (int64_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    std::sort(eig.begin(), eig.end());
    return eig;
}

struct SuiteResult {
    std::string name;
    bool pass = true;
    double max_err = 0.0;
    std::string detail;
};

SuiteResult selftest_gradients() {
    SuiteResult r{"gradient-check"};
    Rng rng(101);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor xpos = add(square(Tensor::randn({3, 4}, rng)), Tensor::scalar(0.5));
    Tensor other = Tensor::randn({3, 4}, rng);
    Tensor mat = Tensor::randn({4, 3}, rng);
    struct Case {
        const char* name;
        std::function<Tensor(const Tensor&)> f;
        const Tensor* at;
    };
    const std::vector<Case> cases = {
        {"add", [&](const Tensor& t) { return reduce_sum(square(add(t, other))); }, &x},
        {"mul", [&](const Tensor& t) { return reduce_sum(square(mul(t, other))); }, &x},
        {"div", [&](const Tensor& t) { return reduce_sum(square(div(other, t))); }, &xpos},
        {"exp", [&](const Tensor& t) { return reduce_sum(exp(t)); }, &x},
        {"sqrt", [&](const Tensor& t) { return reduce_sum(sqrt(t)); }, &xpos},
        {"leaky_relu",
         [&](const Tensor& t) { return reduce_sum(square(leaky_relu(t, 0.01))); }, &xpos},
        {"softplus", [&](const Tensor& t) { return reduce_sum(softplus(t)); }, &x},
        {"matmul", [&](const Tensor& t) { return reduce_sum(square(matmul(t, mat))); }, &x},
        {"gather_rows",
         [&](const Tensor& t) { return reduce_sum(square(gather_rows(t, {2, 0, 1, 0}, {4}))); },
         &x},
        {"reduce_mean", [&](const Tensor& t) { return square(reduce_mean(t)); }, &x},
        {"reduce_max",
         [&](const Tensor& t) { return reduce_sum(square(reduce_max(t, 1))); }, &x},
    };
    for (const auto& c : cases) {
        auto rep = grad_check(c.f, *c.at, 1e-5, 1e-4);
        r.max_err = std::max(r.max_err, rep.max_rel_err);
        if (!rep.pass) {
            r.pass = false;
            r.detail = std::string("op ") + c.name;
            break;
        }
    }
    return r;
}

SuiteResult selftest_bernstein_bound() {
    SuiteResult r{"bernstein-bound"};
    Rng rng(102);
    for (int64_t K = 1; K <= 12 && r.pass; ++K) {
        for (int trial = 0; trial < 20; ++trial) {
            Tensor theta = normalize_coefficients(Tensor::randn({K + 1}, rng, 2.0));
            double mx = 0.0, mn = 1e300;
            for (int g = 0; g <= 1000; ++g) {
                const double v = bernstein_value(theta.values(), g / 1000.0);
                mx = std::max(mx, v);
                mn = std::min(mn, v);
            }
            r.max_err = std::max(r.max_err, mx - 1.0);
            if (mx > 1.0 + 1e-9 || mn <= 0.0) {
                r.pass = false;
                r.detail = "K=" + std::to_string(K);
                break;
            }
        }
    }
    return r;
}

SuiteResult selftest_rk4_order() {
    SuiteResult r{"rk4-order"};
    auto run = [](double dt) {
        OdeState s;
        s.z = Tensor::scalar(1.0);
        s.p = Tensor::scalar(0.0);
        IntegratorConfig cfg;
        cfg.dt = dt;
        cfg.t_end = 1.0;
        RhsFactory f = [](const OdeState&) {
            return RhsFn([](double, const Tensor& z) { return negate(z); });
        };
        return std::fabs(integrate(s, f, cfg).z.item() - std::exp(-1.0));
    };
    const double e1 = run(0.1), e2 = run(0.05), e3 = run(0.025);
    const double r1 = e1 / e2, r2 = e2 / e3;
    r.max_err = std::max(std::fabs(r1 - 16.0), std::fabs(r2 - 16.0));
    if (r1 < 12.0 || r1 > 20.0 || r2 < 12.0 || r2 > 20.0) {
        r.pass = false;
        r.detail = "ratios " + std::to_string(r1) + ", " + std::to_string(r2);
    }
    return r;
}

SuiteResult selftest_kronecker() {
    SuiteResult r{"kronecker-spectrum"};
    Rng rng(103);
    for (int trial = 0; trial < 5; ++trial) {
        const int64_t n = 5, c = 3, K = 4;
        Tensor pts = Tensor::randn({n, 3}, rng);
        auto g = euclidean_adjacency(pts, 2);
        Tensor theta = normalize_coefficients(Tensor::randn({K + 1}, rng));
        Tensor bk = apply_filter(theta, g.structure, g.op_values, Tensor::identity(n));

        // commuting pair: both mixers diagonal in the canonical basis
        std::vector<double> mu(c), vphi(c);
        std::normal_distribution<double> gauss;
        for (auto& v : mu) v = gauss(rng);
        for (auto& v : vphi) v = gauss(rng);

        std::vector<double> bsym(n * n);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j)
                bsym[i * n + j] = 0.5 * (bk.values()[i * n + j] + bk.values()[j * n + i]);
        auto phi = jacobi_eigenvalues(bsym, n);
        auto got = kronecker_spectrum(phi, mu, vphi);

        // dense vectorized operator W1^T (x) B - W2^T (x) I with diagonal mixers
        std::vector<double> m((n * c) * (n * c), 0.0);
        for (int64_t a = 0; a < c; ++a)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < n; ++j)
                    m[(a * n + i) * (n * c) + (a * n + j)] =
                        mu[a] * bsym[i * n + j] - (i == j ? vphi[a] : 0.0);
        auto want = jacobi_eigenvalues(m, n * c);
        for (size_t i = 0; i < got.size(); ++i)
            r.max_err = std::max(r.max_err, std::fabs(got[i] - want[i]));
        if (r.max_err > 1e-8) {
            r.pass = false;
            break;
        }
    }
    return r;
}

int run_selftest(const std::string& inject_op) {
    if (!inject_op.empty()) broken_vjp_hook() = inject_op;
    std::vector<SuiteResult> results = {selftest_gradients(), selftest_bernstein_bound(),
                                        selftest_rk4_order(), selftest_kronecker()};
    broken_vjp_hook() = "";
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("suite=%s status=%s max_err=%.3e%s%s\n", r.name.c_str(),
                    r.pass ? "pass" : "fail", r.max_err, r.detail.empty() ? "" : " ",
                    r.detail.c_str());
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// subcommand bodies

int cmd_synth(const std::string& shape, int64_t n, double noise, uint64_t seed,
              const std::string& out, const std::string& clean_out, bool ply_binary) {
    PointCloud clean = synth(parse_shape(shape), n, seed);
    PointCloud noisy = add_noise(clean, {noise, seed ^ 0xa5a5a5a5ULL});
    save_cloud(noisy, out, format_for_path(out, ply_binary));
    if (!clean_out.empty())
        save_cloud(clean, clean_out, format_for_path(clean_out, ply_binary));
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& val_dir, const std::string& out, const std::string& log_path) {
    RunConfig rc = load_run_config(config_path);
    auto train_clouds = load_cloud_dir(data_dir);
    auto val_clouds = load_cloud_dir(val_dir);
    ModelParams params = init_params(rc.model, rc.train.seed);

    const std::string log_file = log_path.empty() ? out + ".log.csv" : log_path;
    std::ofstream log(log_file);
    if (!log) throw IoError("cannot write log " + log_file);
    log << "iter,loss,lr,val_cd\n";

    TrainSinks sinks;
    sinks.checkpoint = [&](const ModelParams& p, bool is_best) {
        save_checkpoint(is_best ? out : out + ".final", p, rc.model);
    };
    sinks.log_line = [&](const std::string& line) { log << line << "\n"; };

    TrainResult res = train(rc.model, params, train_clouds, val_clouds, rc.train, sinks);
    std::fprintf(stderr, "train: initial val_cd %.6e, best %.6e, final %.6e\n",
                 res.initial_val_cd, res.best_val_cd, res.final_val_cd);
    return 0;
}

int cmd_denoise(const std::string& ckpt, const std::string& in, const std::string& out,
                const std::string& variant, const std::string& snapshots, bool ply_binary) {
    Checkpoint ck = load_checkpoint(ckpt);
    if (!variant.empty()) {
        const Variant v = parse_variant(variant);
        if (v == Variant::DtlGcn && ck.params.dtl_theta.empty())
            throw UsageError("checkpoint has no dtl-gcn parameters");
        ck.config.variant = v;
    }
    PointCloud noisy = load_cloud(in);
    PointCloud denoised = forward(noisy, ck.params, ck.config);
    save_cloud(denoised, out, format_for_path(out, ply_binary));
    if (!snapshots.empty()) {
        const std::vector<double> fractions = parse_csv_doubles(snapshots);
        auto snaps = forward_snapshots(noisy, ck.params, ck.config, fractions);
        const auto dot = out.rfind('.');
        const std::string base = dot == std::string::npos ? out : out.substr(0, dot);
        const std::string ext = dot == std::string::npos ? ".xyz" : out.substr(dot);
        for (size_t i = 0; i < fractions.size(); ++i) {
            char frac[32];
            std::snprintf(frac, sizeof(frac), "%g", fractions[i]);
            const std::string path = base + ".t" + frac + ext;
            save_cloud(snaps[i], path, format_for_path(path, ply_binary));
        }
    }
    return 0;
}

int cmd_eval(const std::string& ref_path, const std::string& test_path,
             const std::string& metrics) {
    bool want_cd = false, want_emd = false, want_hd = false, want_rmsd = false;
    std::stringstream ss(metrics);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "cd")
            want_cd = true;
        else if (tok == "emd")
            want_emd = true;
        else if (tok == "hd")
            want_hd = true;
        else if (tok == "rmsd")
            want_rmsd = true;
        else if (!tok.empty())
            throw UsageError("unknown metric '" + tok + "'");
    }
    if (!(want_cd || want_emd || want_hd || want_rmsd)) throw UsageError("no metrics requested");
    PointCloud ref = load_cloud(ref_path);
    PointCloud test = load_cloud(test_path);
    if (want_emd && ref.size() != test.size())
        throw UsageError("emd requires equal cloud sizes (" + std::to_string(test.size()) +
                         " vs " + std::to_string(ref.size()) + ")");
    MetricReport r = evaluate(ref, test, want_cd, want_emd, want_hd, want_rmsd);
    Json j;
    if (r.has_cd) j["cd"] = r.cd;
    if (r.has_emd) j["emd"] = r.emd;
    if (r.has_hd) j["hd"] = r.hd;
    if (r.has_rmsd) j["rmsd"] = r.rmsd;
    j["n_ref"] = r.n_ref;
    j["n_test"] = r.n_test;
    j["emd_exact"] = r.emd_exact;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_filter_response(const std::string& basis, const std::string& filter, int64_t K,
                        const std::string& theta_csv, int64_t grid_n, const std::string& out) {
    if (basis.empty() == filter.empty())
        throw UsageError("specify exactly one of --basis or --filter");
    const std::vector<double> grid = lambda_grid(grid_n);
    std::vector<double> response;
    if (!basis.empty()) {
        if (basis != "bernstein") throw UsageError("unknown basis '" + basis + "'");
        const std::vector<double> raw = parse_csv_doubles(theta_csv);
        if (static_cast<int64_t>(raw.size()) != K + 1)
            throw UsageError("bernstein basis of order K needs K+1 coefficients");
        Tensor theta = normalize_coefficients(Tensor({K + 1}, std::vector<double>(raw)));
        response.resize(grid.size());
        for (size_t i = 0; i < grid.size(); ++i)
            response[i] = bernstein_value(theta.values(), grid[i]);
    } else {
        response = closed_form_response(parse_closed_form_filter(filter),
                                        parse_csv_doubles(theta_csv), grid);
    }
    std::ostringstream csv;
    csv << "lambda,response\n";
    char buf[80];
    for (size_t i = 0; i < grid.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g\n", grid[i], response[i]);
        csv << buf;
    }
    if (out.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream f(out);
        if (!f) throw IoError("cannot write " + out);
        f << csv.str();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gdflow: graph-dynamics point cloud denoising"};
    app.require_subcommand(1);

    // synth
    std::string sy_shape = "sphere", sy_out, sy_clean;
    int64_t sy_n = 1024;
    double sy_noise = 0.0;
    uint64_t sy_seed = 0;
    bool sy_ply_binary = false;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic noisy/clean pair");
    synth_cmd->add_option("--shape", sy_shape, "sphere|torus|cube|plane");
    synth_cmd->add_option("--n", sy_n, "number of points");
    synth_cmd->add_option("--noise", sy_noise, "sigma as fraction of bbox diagonal");
    synth_cmd->add_option("--seed", sy_seed, "random seed");
    synth_cmd->add_option("--out", sy_out, "noisy output path")->required();
    synth_cmd->add_option("--clean", sy_clean, "clean output path");
    synth_cmd->add_flag("--ply-binary", sy_ply_binary, "write binary PLY for .ply outputs");

    // train
    std::string tr_config, tr_data, tr_val, tr_out, tr_log;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->add_option("--config", tr_config, "run config JSON")->required();
    train_cmd->add_option("--data", tr_data, "training cloud directory")->required();
    train_cmd->add_option("--val", tr_val, "validation cloud directory")->required();
    train_cmd->add_option("--out", tr_out, "best checkpoint path")->required();
    train_cmd->add_option("--log", tr_log, "training log CSV (default <out>.log.csv)");

    // denoise
    std::string dn_ckpt, dn_in, dn_out, dn_variant, dn_snapshots;
    bool dn_ply_binary = false;
    auto* denoise_cmd = app.add_subcommand("denoise", "denoise a point cloud");
    denoise_cmd->add_option("--ckpt", dn_ckpt, "checkpoint path")->required();
    denoise_cmd->add_option("--in", dn_in, "noisy input cloud")->required();
    denoise_cmd->add_option("--out", dn_out, "denoised output path")->required();
    denoise_cmd->add_option("--variant", dn_variant, "override model variant");
    denoise_cmd->add_option("--snapshots", dn_snapshots,
                            "comma separated fractions of T, written as out.t<frac>.<ext>");
    denoise_cmd->add_flag("--ply-binary", dn_ply_binary, "write binary PLY for .ply outputs");

    // eval
    std::string ev_ref, ev_test, ev_metrics = "cd,emd,hd,rmsd";
    auto* eval_cmd = app.add_subcommand("eval", "evaluate denoising metrics");
    eval_cmd->add_option("--ref", ev_ref, "reference (clean) cloud")->required();
    eval_cmd->add_option("--test", ev_test, "cloud under test")->required();
    eval_cmd->add_option("--metrics", ev_metrics, "subset of cd,emd,hd,rmsd");

    // filter-response
    std::string fr_basis, fr_filter, fr_theta, fr_out;
    int64_t fr_K = 8, fr_grid = 256;
    auto* fr_cmd = app.add_subcommand("filter-response", "export a spectral response curve");
    fr_cmd->add_option("--basis", fr_basis, "bernstein (normalized learnable basis)");
    fr_cmd->add_option("--filter", fr_filter, "ppr|gnn-lf|gnn-hf|chebyshev|vanilla");
    fr_cmd->add_option("--K", fr_K, "bernstein order");
    fr_cmd->add_option("--theta", fr_theta, "comma separated parameters")->required();
    fr_cmd->add_option("--grid", fr_grid, "number of lambda samples in [0,1]");
    fr_cmd->add_option("--out", fr_out, "output CSV (stdout if omitted)");

    // selftest
    std::string st_inject;
    auto* st_cmd = app.add_subcommand("selftest", "run the numeric selftest suites");
    st_cmd->add_option("--inject-bad-vjp", st_inject,
                       "test fixture: corrupt the named op's gradient");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (synth_cmd->parsed())
            return cmd_synth(sy_shape, sy_n, sy_noise, sy_seed, sy_out, sy_clean, sy_ply_binary);
        if (train_cmd->parsed()) return cmd_train(tr_config, tr_data, tr_val, tr_out, tr_log);
        if (denoise_cmd->parsed())
            return cmd_denoise(dn_ckpt, dn_in, dn_out, dn_variant, dn_snapshots, dn_ply_binary);
        if (eval_cmd->parsed()) return cmd_eval(ev_ref, ev_test, ev_metrics);
        if (fr_cmd->parsed())
            return cmd_filter_response(fr_basis, fr_filter, fr_K, fr_theta, fr_grid, fr_out);
        if (st_cmd->parsed()) return run_selftest(st_inject);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
