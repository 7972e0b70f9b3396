#include "rfcnet/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rfcnet/experiment.hpp"

namespace rfcnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::string profile = "full";
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* app, Common& c, bool with_out = true) {
    app->add_option("--config", c.config, "experiment config JSON (default: built-in)");
    app->add_option("--profile", c.profile, "config profile")->check(CLI::IsMember({"full", "tiny"}));
    app->add_option("--seed", c.seed, "override the seed used by this command");
    if (with_out) app->add_option("--out", c.out, "output directory");
}

experiment::ExperimentConfig load_config(const Common& c) {
    if (c.config.empty()) return experiment::resolve(experiment::default_document(), c.profile);
    return experiment::load(c.config, c.profile);
}

const models::ModelSpec& model_or_usage(const experiment::ExperimentConfig& cfg, const std::string& name) {
    const auto& names = models::zoo_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
        std::string all;
        for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
        throw UsageError("unknown model '" + name + "' (expected one of: " + all + ")");
    }
    return cfg.model(name);
}

// ---- plots ----

struct Rgb {
    std::uint8_t r, g, b;
};

const Rgb kPalette[14] = {{0, 0, 0},       {128, 128, 128}, {230, 25, 75},  {60, 180, 75},   {255, 225, 25},
                          {0, 130, 200},   {245, 130, 48},  {145, 30, 180}, {70, 240, 240},  {240, 50, 230},
                          {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255}};

class Image {
public:
    Image(int w, int h, Rgb fill = {255, 255, 255}) : w_(w), h_(h), px_(std::size_t(w) * h, fill) {}
    void set(int x, int y, Rgb c) {
        if (x >= 0 && y >= 0 && x < w_ && y < h_) px_[std::size_t(y) * w_ + x] = c;
    }
    void rect(int x0, int y0, int x1, int y1, Rgb c) {
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) set(x, y, c);
    }
    void save_ppm(const fs::path& p) const {
        std::ofstream f(p, std::ios::binary);
        f << "P6\n" << w_ << " " << h_ << "\n255\n";
        for (const auto& c : px_) f.put(char(c.r)).put(char(c.g)).put(char(c.b));
    }

private:
    int w_, h_;
    std::vector<Rgb> px_;
};

// Paired bars per class: perturbed test (dark) next to clean test (light).
void iou_bar_chart(const train::EvalResult& test, const train::EvalResult* clean, const fs::path& path) {
    const int bar = 8, gap = 6, height = 200, pad = 10;
    const int group = clean ? 2 * bar + gap : bar + gap;
    Image img(pad * 2 + 14 * group, height + 2 * pad);
    img.rect(pad, pad + height, pad + 14 * group, pad + height + 1, {0, 0, 0});
    for (int c = 0; c < 14; ++c) {
        const int x = pad + c * group;
        auto draw = [&](const train::EvalResult& r, int dx, double shade) {
            const auto iou = r.iou[std::size_t(c)];
            if (!iou) return;
            const int h = int(std::lround(*iou * height));
            const Rgb k = kPalette[c];
            const Rgb col{std::uint8_t(k.r * shade), std::uint8_t(k.g * shade), std::uint8_t(k.b * shade)};
            img.rect(x + dx, pad + height - h, x + dx + bar, pad + height, col);
        };
        draw(test, 0, 0.6);
        if (clean) draw(*clean, bar, 1.0);
    }
    img.save_ppm(path);
}

// Input frame | ground truth | prediction for one sequence.
void prediction_panel(models::Network<float>& net, const data::SplitReader& split, const fs::path& path) {
    const auto s = split.get(0);
    const std::vector<data::StoredSample> one{s};
    auto b = train::make_batch(one);
    std::vector<Var<float>> frames;
    for (auto& f : b.frames) frames.emplace_back(std::move(f));
    NoGradGuard guard;
    const auto pred = train::argmax_labels(net.forward_sequence(frames, nn::RunContext{}).value());
    const int n = s.sample.size, scale = 3;
    const std::size_t last = std::size_t(s.sample.frames_count - 1) * std::size_t(s.sample.channels) * n * n;
    Image img(3 * n * scale + 2 * scale, n * scale);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const std::size_t i = std::size_t(y) * n + x;
            const auto g = std::uint8_t(std::clamp(s.sample.frames[last + i], 0.0f, 1.0f) * 255.0f);
            const Rgb panels[3] = {{g, g, g}, kPalette[s.sample.label[i]], kPalette[pred[i]]};
            for (int p = 0; p < 3; ++p) {
                const int x0 = p * (n + 1) * scale + x * scale, y0 = y * scale;
                img.rect(x0, y0, x0 + scale, y0 + scale, panels[p]);
            }
        }
    }
    img.save_ppm(path);
}

std::string pct(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * v;
    return os.str();
}

// ---- subcommands ----

int cmd_generate(const Common& c, std::optional<int> workers, const std::string& mnist_dir, std::ostream& out) {
    auto cfg = load_config(c);
    if (c.seed) cfg.scene.seed = *c.seed;
    if (workers) cfg.dataset.workers = *workers;
    if (!mnist_dir.empty()) cfg.dataset.mnist_dir = mnist_dir;
    const fs::path dir = c.out.empty() ? fs::path(cfg.dataset.dir) : fs::path(c.out);
    const auto glyphs = mnist::GlyphSource::resolve(cfg.dataset.mnist_dir);

    data::GenerateOptions opt;
    opt.scene = cfg.scene;
    opt.seed = cfg.scene.seed;
    opt.counts = cfg.dataset.counts;
    opt.shard_size = cfg.dataset.shard_size;
    opt.dtype = cfg.dataset.dtype;
    opt.workers = cfg.dataset.workers;
    const auto t0 = std::chrono::steady_clock::now();
    const auto m = data::generate_dataset(opt, glyphs, dir);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    experiment::write_stamp(dir, "generate-data", cfg, opt.seed,
                            {{"profile", c.profile}, {"glyph_source", glyphs.origin()}});
    out << "generated " << dir.string() << " in " << std::fixed << std::setprecision(1) << secs << " s (glyphs: "
        << glyphs.origin() << ")\n";
    for (const auto& s : m.splits) out << "  " << std::left << std::setw(12) << s.name << s.count << " sequences\n";
    return kExitOk;
}

struct TrainFlags {
    std::string spec;
    std::string data;
    std::optional<int> max_epochs;
    std::optional<double> time_budget;
    std::string init_from;
    bool resume = false;
};

void reject_identity(const models::ModelSpec& spec) {
    if (spec.fm_kind == nn::FilterKind::identity) {
        throw UsageError("model '" + spec.name + "' uses identity filter modules, which are a test-only reduction");
    }
}

int cmd_train(const Common& c, const TrainFlags& f, std::ostream& out) {
    auto cfg = load_config(c);
    const auto spec = model_or_usage(cfg, f.spec);
    reject_identity(spec);
    if (c.seed) cfg.train.seed = *c.seed;
    if (f.max_epochs) cfg.train.max_epochs = *f.max_epochs;
    if (f.time_budget) cfg.train.time_budget_s = *f.time_budget;
    if (!f.init_from.empty()) cfg.train.init_from = f.init_from;
    cfg.train.validate();
    const fs::path data_dir = f.data.empty() ? fs::path(cfg.dataset.dir) : fs::path(f.data);
    const fs::path dir = c.out.empty() ? fs::path("runs") / f.spec : fs::path(c.out);
    experiment::write_stamp(dir, "train", cfg, cfg.train.seed,
                            {{"profile", c.profile}, {"model", f.spec}, {"data", data_dir.string()}});
    train::TrainHooks hooks;
    hooks.on_epoch = [&](const train::EpochRecord& r) {
        out << "epoch " << r.epoch << "  loss " << std::fixed << std::setprecision(4) << r.train_loss << "  val mIoU "
            << pct(r.val_miou) << (r.improved ? "  *" : "") << "  (" << std::setprecision(1) << r.wall_time_s
            << " s)\n"
            << std::flush;
    };
    const auto r = train::train(spec, data_dir, cfg.train, dir, hooks, f.resume);
    if (r.initialized_tensors) out << "initialized " << r.initialized_tensors << " tensors from " << f.init_from << "\n";
    out << "best val mIoU " << pct(r.best_val_miou) << " at epoch " << r.best_epoch;
    if (r.stopped_early) out << " (early stop)";
    if (r.budget_exhausted) out << " (time budget reached)";
    if (r.reached_target) out << " (target reached)";
    out << "\ncheckpoint " << r.best_checkpoint.string() << "\n";
    return kExitOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, std::vector<std::string> splits, const std::string& data,
             int batch, std::ostream& out) {
    auto cfg = load_config(c);
    const auto ck = train::load_checkpoint(checkpoint);
    auto net = train::network_from_checkpoint(ck);
    const fs::path data_dir = data.empty() ? fs::path(cfg.dataset.dir) : fs::path(data);
    const auto manifest = data::read_manifest(data_dir);
    json results = json::object();
    std::map<std::string, double> means;
    for (const auto& split : splits) {
        const data::SplitReader reader(data_dir, manifest, split);
        const auto r = train::evaluate(*net, reader, batch);
        out << train::format_eval_table(ck.spec.name + " on " + split, r) << "\n";
        results[split] = train::to_json(r);
        means[split] = r.mean_iou;
    }
    if (means.count("test") && means.count("clean_test")) {
        out << "clean_test - test gap: " << pct(means["clean_test"] - means["test"]) << " points\n";
    }
    if (!c.out.empty()) {
        experiment::write_stamp(c.out, "eval", cfg, ck.config.seed,
                                {{"checkpoint", checkpoint}, {"data", data_dir.string()}});
        std::ofstream(fs::path(c.out) / "eval.json") << json{{"model", ck.spec.name}, {"splits", results}}.dump(2)
                                                     << "\n";
    }
    return kExitOk;
}

int cmd_count(const Common& c, std::vector<std::string> names, std::ostream& out) {
    const auto cfg = load_config(c);
    if (names.empty()) names = models::zoo_names();
    std::map<std::string, std::size_t> totals;
    for (const auto& name : names) {
        models::Network<float> net(model_or_usage(cfg, name), 0);
        const auto t = net.count_params();
        totals[name] = t.total();
        out << models::format_param_table(name, t) << "\n";
    }
    if (names.size() > 1) {
        const std::size_t ref = totals.count("rfcd_ff") ? totals["rfcd_ff"] : 0;
        out << std::left << std::setw(12) << "model" << std::right << std::setw(12) << "total";
        if (ref) out << std::setw(14) << "vs rfcd_ff";
        out << "\n";
        for (const auto& name : names) {
            out << std::left << std::setw(12) << name << std::right << std::setw(12) << totals[name];
            if (ref) {
                out << std::setw(13) << std::showpos << std::fixed << std::setprecision(1)
                    << 100.0 * (double(totals[name]) / double(ref) - 1.0) << "%" << std::noshowpos;
            }
            out << "\n";
        }
    }
    if (!c.out.empty()) {
        json j = json::object();
        for (const auto& [k, v] : totals) j[k] = v;
        experiment::write_stamp(c.out, "count-params", cfg, 0, {{"profile", c.profile}});
        std::ofstream(fs::path(c.out) / "params.json") << j.dump(2) << "\n";
    }
    return kExitOk;
}

int cmd_report(const Common& c, const std::vector<std::string>& checkpoints, const std::string& data, bool plots,
               int batch, std::ostream& out) {
    if (c.out.empty()) throw UsageError("report needs --out");
    auto cfg = load_config(c);
    const fs::path data_dir = data.empty() ? fs::path(cfg.dataset.dir) : fs::path(data);
    const auto manifest = data::read_manifest(data_dir);
    const fs::path dir = c.out;
    fs::create_directories(dir);
    const data::SplitReader test(data_dir, manifest, "test");
    std::optional<data::SplitReader> clean;
    if (manifest.has_split("clean_test")) clean.emplace(data_dir, manifest, "clean_test");

    std::ostringstream md;
    md << "# Mean IoU (%)\n\n| model | test | clean test | gap |\n|---|---:|---:|---:|\n";
    std::ostringstream per_class;
    json all = json::object();
    std::ofstream csv(dir / "per_class_iou.csv");
    csv << "model,split";
    for (int k = 0; k < 14; ++k) csv << "," << train::class_name(k);
    csv << ",mean\n";
    auto csv_row = [&](const std::string& name, const std::string& split, const train::EvalResult& r) {
        csv << name << "," << split;
        for (const auto& v : r.iou) {
            csv << ",";
            if (v) csv << *v;
        }
        csv << "," << r.mean_iou << "\n";
    };
    std::set<std::string> used;
    for (const auto& path : checkpoints) {
        const auto ck = train::load_checkpoint(path);
        std::string name = ck.spec.name;
        for (int k = 2; used.count(name); ++k) name = ck.spec.name + "_" + std::to_string(k);
        used.insert(name);
        auto net = train::network_from_checkpoint(ck);
        const auto rt = train::evaluate(*net, test, batch);
        std::optional<train::EvalResult> rc;
        if (clean) rc = train::evaluate(*net, *clean, batch);
        md << "| " << name << " | " << pct(rt.mean_iou) << " | " << (rc ? pct(rc->mean_iou) : "-") << " | "
           << (rc ? pct(rc->mean_iou - rt.mean_iou) : "-") << " |\n";
        per_class << "```\n" << train::format_eval_table(name + " on test", rt);
        if (rc) per_class << "\n" << train::format_eval_table(name + " on clean_test", *rc);
        per_class << "```\n\n";
        csv_row(name, "test", rt);
        all[name]["test"] = train::to_json(rt);
        if (rc) {
            csv_row(name, "clean_test", *rc);
            all[name]["clean_test"] = train::to_json(*rc);
        }
        all[name]["checkpoint"] = path;
        if (plots) {
            iou_bar_chart(rt, rc ? &*rc : nullptr, dir / ("iou_" + name + ".ppm"));
            prediction_panel(*net, test, dir / ("prediction_" + name + ".ppm"));
        }
        out << std::left << std::setw(12) << name << " test " << pct(rt.mean_iou);
        if (rc) out << "  clean " << pct(rc->mean_iou);
        out << "\n";
    }
    md << "\nIoU per class comes from one confusion matrix per split; classes with no labelled or predicted pixel "
          "are excluded from the mean.\n\n## Per-class IoU\n\n"
       << per_class.str();
    std::ofstream(dir / "report.md") << md.str();
    std::ofstream(dir / "report.json") << all.dump(2) << "\n";
    experiment::write_stamp(dir, "report", cfg, 0, {{"checkpoints", checkpoints}, {"data", data_dir.string()}});
    out << "report written to " << (dir / "report.md").string() << "\n";
    return kExitOk;
}

std::map<std::string, json> parse_axes(const std::vector<std::string>& axes) {
    std::map<std::string, json> out;
    for (const auto& a : axes) {
        const auto eq = a.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == a.size()) {
            throw UsageError("--axis expects key=v1,v2,... (got '" + a + "')");
        }
        json values = json::array();
        std::stringstream ss(a.substr(eq + 1));
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                values.push_back(json::parse(item));
            } catch (const json::parse_error&) {
                values.push_back(item);  // bare word, e.g. a filter kind
            }
        }
        out[a.substr(0, eq)] = values;
    }
    return out;
}

int cmd_grid(const Common& c, const TrainFlags& f, const std::vector<std::string>& axes, std::ostream& out) {
    auto cfg = load_config(c);
    const auto base = model_or_usage(cfg, f.spec);
    reject_identity(base);
    if (c.seed) cfg.train.seed = *c.seed;
    if (f.max_epochs) cfg.train.max_epochs = *f.max_epochs;
    if (f.time_budget) cfg.train.time_budget_s = *f.time_budget;
    cfg.train.validate();
    const fs::path data_dir = f.data.empty() ? fs::path(cfg.dataset.dir) : fs::path(f.data);
    const fs::path dir = c.out.empty() ? fs::path("runs") / ("grid_" + f.spec) : fs::path(c.out);
    const auto cells = train::expand_grid(base, parse_axes(axes));
    experiment::write_stamp(dir, "grid-search", cfg, cfg.train.seed,
                            {{"profile", c.profile}, {"model", f.spec}, {"axes", axes}});
    out << cells.size() << " cell(s)\n" << std::flush;
    const auto rows = train::grid_search(cells, data_dir, cfg.train, dir);
    const auto table = train::format_grid_table(rows);
    std::ofstream(dir / "ranking.txt") << table;
    out << table;
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Recurrent FC-DenseNet experiments on synthetic scenes", args.empty() ? "rfcnet" : args[0]};
    app.require_subcommand(1);
    app.set_version_flag("--version", experiment::code_version());

    Common gen_c, train_c, eval_c, count_c, report_c, grid_c, show_c;
    std::optional<int> workers;
    std::string mnist_dir;
    auto* gen = app.add_subcommand("generate-data", "render every dataset split to disk");
    add_common(gen, gen_c);
    gen->add_option("--workers", workers, "generation threads")->check(CLI::PositiveNumber);
    gen->add_option("--mnist-dir", mnist_dir, "directory with IDX digit files");

    TrainFlags tf;
    auto* tr = app.add_subcommand("train", "train one model, keeping the best validation checkpoint");
    add_common(tr, train_c);
    tr->add_option("--spec", tf.spec, "model name from the config's models section")->required();
    tr->add_option("--data", tf.data, "dataset directory (default: dataset.dir)");
    tr->add_option("--max-epochs", tf.max_epochs, "override train.max_epochs")->check(CLI::PositiveNumber);
    tr->add_option("--time-budget", tf.time_budget, "override train.time_budget_s (seconds)");
    tr->add_option("--init-from", tf.init_from, "seed matching tensors from this checkpoint")
        ->check(CLI::ExistingFile);
    tr->add_flag("--resume", tf.resume, "continue from <out>/last.ckpt");

    std::string checkpoint, eval_data;
    std::vector<std::string> splits{"test"};
    int eval_batch = 8;
    auto* ev = app.add_subcommand("eval", "per-class and mean IoU of a checkpoint");
    add_common(ev, eval_c);
    ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", splits, "split(s) to evaluate, repeatable")->capture_default_str();
    ev->add_option("--data", eval_data, "dataset directory (default: dataset.dir)");
    ev->add_option("--batch", eval_batch, "sequences per forward pass")->check(CLI::PositiveNumber);

    std::vector<std::string> count_specs;
    auto* cp = app.add_subcommand("count-params", "exact parameter counts grouped by role");
    add_common(cp, count_c);
    cp->add_option("--spec", count_specs, "model name(s); default all");

    std::vector<std::string> report_ckpts;
    std::string report_data;
    bool plots = false;
    int report_batch = 8;
    auto* rp = app.add_subcommand("report", "test/clean-test IoU tables and optional plots for checkpoints");
    add_common(rp, report_c);
    rp->add_option("--checkpoint", report_ckpts, "checkpoint file(s)")->required()->check(CLI::ExistingFile);
    rp->add_option("--data", report_data, "dataset directory (default: dataset.dir)");
    rp->add_flag("--plots", plots, "also write PPM bar charts and prediction panels");
    rp->add_option("--batch", report_batch, "sequences per forward pass")->check(CLI::PositiveNumber);

    TrainFlags gf;
    std::vector<std::string> axes;
    auto* gs = app.add_subcommand("grid-search", "train a grid of spec variants and rank by validation mIoU");
    add_common(gs, grid_c);
    gs->add_option("--spec", gf.spec, "base model name")->required();
    gs->add_option("--axis", axes, "spec field and values, e.g. layers_per_db=7,9 (repeatable)");
    gs->add_option("--data", gf.data, "dataset directory (default: dataset.dir)");
    gs->add_option("--max-epochs", gf.max_epochs, "override train.max_epochs per cell")->check(CLI::PositiveNumber);
    gs->add_option("--time-budget", gf.time_budget, "per-cell time budget in seconds");

    auto* sc = app.add_subcommand("show-config", "print the effective experiment config as JSON");
    add_common(sc, show_c, false);
    bool show_document = false;
    sc->add_flag("--document", show_document, "print the full document including profiles");

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            // --help / --version
            app.exit(e, out, err);
            return kExitOk;
        }
        err << "error: " << e.what() << "\n\n";
        const CLI::App* failing = &app;
        for (const auto* sub : app.get_subcommands()) failing = sub;
        err << failing->help();
        return kExitUsage;
    }

    const auto* active = app.get_subcommands().front();
    try {
        if (active == gen) return cmd_generate(gen_c, workers, mnist_dir, out);
        if (active == tr) return cmd_train(train_c, tf, out);
        if (active == ev) return cmd_eval(eval_c, checkpoint, splits, eval_data, eval_batch, out);
        if (active == cp) return cmd_count(count_c, count_specs, out);
        if (active == rp) return cmd_report(report_c, report_ckpts, report_data, plots, report_batch, out);
        if (active == gs) return cmd_grid(grid_c, gf, axes, out);
        if (active == sc) {
            out << (show_document ? experiment::default_document() : json(load_config(show_c))).dump(2) << "\n";
            return kExitOk;
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n\n" << active->help();
        return kExitUsage;
    } catch (const experiment::BadConfig& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        // BadSpec, BadTrainConfig, scene::BadConfig
        err << "invalid configuration: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace rfcnet::cli
