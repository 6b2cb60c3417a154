#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "xformer/trainer.hpp"

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw xf::FormatError("cannot write '" + path.string() + "'");
    out << text;
}

int run_train(const std::string& config_path, const std::string& out_dir, long steps_override) {
    auto config = xf::ModelConfig::load(config_path);
    if (steps_override >= 0) config.steps = static_cast<std::size_t>(steps_override);
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    write_text(dir / "config.json", config.to_json() + "\n");

    xf::Trainer trainer(config);
    const auto eval_set = xf::make_dataset(config.eval_data, trainer.model().synthesis_context());

    std::ofstream loss_log(dir / "train_log.csv");
    loss_log << xf::LossReport::csv_header() << ",batch_loss\n";
    std::ofstream eval_log(dir / "eval_log.csv");
    eval_log << "step,branch,samples,mpjpe,pa_mpjpe,pve\n";

    auto log_eval = [&](std::uint64_t step) {
        const auto report = xf::evaluate(trainer.model(), eval_set);
        for (const auto& r : report.rows) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%llu,%s,%zu,%.10g,%.10g,%.10g\n", static_cast<unsigned long long>(step),
                          r.name.c_str(), r.samples.size(), r.mpjpe, r.pa_mpjpe, r.pve);
            eval_log << buf;
        }
        eval_log.flush();
        std::cout << "step " << step << "\n" << report.summary();
    };

    trainer.run(config.steps, [&](const xf::StepRecord& rec) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.10g", rec.loss);
        for (std::size_t i = 0; i < rec.reports.size(); ++i)
            loss_log << rec.reports[i].csv_row(rec.step, xf::dataset_type_name(rec.types[i])) << ',' << buf << '\n';
        const auto done = rec.step + 1;
        if (config.eval_every && done % config.eval_every == 0 && done != config.steps) log_eval(done);
    });
    log_eval(trainer.steps_done());
    trainer.save((dir / "checkpoint.xfc").string());
    std::cout << "checkpoint " << (dir / "checkpoint.xfc").string() << "\n";
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& out, const std::string& per_sample) {
    const auto model = xf::load_model(ckpt);
    const auto spec = xf::DatasetSpec::load(data);
    const auto report = xf::evaluate(model, xf::make_dataset(spec, model.synthesis_context()));
    std::cout << report.summary();
    if (!out.empty()) write_text(out, report.csv());
    if (!per_sample.empty()) write_text(per_sample, report.per_sample_csv());
    return 0;
}

int run_bench(const std::string& ckpt, const std::string& preset, std::size_t iters, std::size_t warmup, int threads) {
    if (threads != 1) throw xf::ContractError("bench: only --threads 1 is supported");
    std::optional<xf::XFormerModel> model;
    if (!ckpt.empty())
        model.emplace(xf::load_model(ckpt));
    else if (preset == "paper_shape")
        model.emplace(xf::ModelConfig::paper_shape());
    else if (preset == "ours_small_toy")
        model.emplace(xf::ModelConfig::ours_small_toy());
    else
        throw xf::ContractError("bench: give --ckpt or a known --preset");
    const auto report = xf::benchmark(*model, iters, warmup);
    std::cout << "threads 1\n" << report.text();
    return 0;
}

int run_gen(const std::string& spec_path, const std::string& out, const std::string& config_path) {
    const auto config = config_path.empty() ? xf::ModelConfig::ours_small_toy() : xf::ModelConfig::load(config_path);
    const auto assets = xf::make_synthetic_assets(config.full_vertices, config.coarse_vertices);
    xf::SynthesisContext ctx;
    ctx.body = &assets.body;
    ctx.image_h = config.image_h;
    ctx.image_w = config.image_w;
    ctx.augment = config.augment;
    ctx.frame = xf::OrthoFrame::for_image(config.image_h, config.image_w);
    const auto samples = xf::make_dataset(xf::DatasetSpec::load(spec_path), ctx);
    xf::save_samples(out, samples);
    std::cout << samples.size() << " samples written to " << out << "\n";
    return 0;
}

int run_export(const std::string& ckpt, std::size_t index, const std::string& out, const std::string& data,
               const std::string& direction, std::size_t module) {
    const auto model = xf::load_model(ckpt);
    const auto spec = data.empty() ? model.config().eval_data : xf::DatasetSpec::load(data);
    const auto samples = xf::make_dataset(spec, model.synthesis_context());
    if (index >= samples.size())
        throw xf::ContractError("export-attn: sample " + std::to_string(index) + " of " + std::to_string(samples.size()));
    const auto& sample = samples[index];
    xf::NoGradGuard guard;
    const auto result = model.forward(sample, {false, {}});
    if (module >= result.cross.size()) throw xf::ContractError("export-attn: model has no cross-modal module " + std::to_string(module));
    const auto& cross = result.cross[module];
    const auto& kp_roles = cross.keypoint_att.roles;
    if (!cross.image_att) throw xf::ContractError("export-attn: sample has no image modality");
    const auto& img_roles = cross.image_att->roles;
    std::string csv;
    if (direction == "kp")
        csv = xf::attention_csv(*cross.attn_keypoint_over_image, kp_roles, img_roles);
    else if (direction == "img")
        csv = xf::attention_csv(*cross.attn_image_over_keypoint, img_roles, kp_roles);
    else
        throw xf::ContractError("export-attn: --direction must be 'kp' or 'img'");
    write_text(out, csv);
    return 0;
}

int run_overfit(const std::string& config_path, long steps_override, std::size_t every, const std::string& out) {
    auto config = xf::ModelConfig::load(config_path);
    if (steps_override >= 0) config.steps = static_cast<std::size_t>(steps_override);
    if (every == 0) throw xf::ContractError("overfit: --every must be positive");
    xf::Trainer trainer(config);
    std::ofstream log;
    if (!out.empty()) {
        log.open(out);
        if (!log) throw xf::FormatError("cannot write '" + out + "'");
        log << "step,train_mpjpe,ratio,keypoint_mpjpe,image_mpjpe,batch_loss,seconds\n";
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto first = xf::branch_mpjpe(trainer.model(), trainer.train_set(), config.teacher_forcing);
    double last_loss = 0.0;
    auto report = [&](std::uint64_t step) {
        const auto m = step == 0 ? first : xf::branch_mpjpe(trainer.model(), trainer.train_set(), config.teacher_forcing);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[200];
        std::snprintf(buf, sizeof buf, "%llu,%.8g,%.6f,%.8g,%.8g,%.8g,%.1f\n", static_cast<unsigned long long>(step),
                      m.fused, m.fused / first.fused, m.keypoint.value_or(NAN), m.image.value_or(NAN), last_loss, secs);
        std::cout << buf << std::flush;
        if (log.is_open()) log << buf << std::flush;
    };
    report(0);
    trainer.run(config.steps, [&](const xf::StepRecord& rec) {
        last_loss = rec.loss;
        if ((rec.step + 1) % every == 0) report(rec.step + 1);
    });
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-branch body-mesh regression: train, evaluate, benchmark"};
    app.require_subcommand(1);

    std::string config_path, out, ckpt, data, spec, preset = "ours_small_toy", per_sample, direction = "kp";
    long steps = -1;
    std::size_t iters = 50, warmup = 10, sample = 0, module = 0;
    int threads = 1;

    auto* train = app.add_subcommand("train", "Train a model from a JSON config");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--out", out, "output directory")->required();
    train->add_option("--steps", steps, "override config steps");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a synthetic dataset spec");
    eval->add_option("--ckpt", ckpt)->required();
    eval->add_option("--data", data, "dataset spec JSON")->required();
    eval->add_option("--out", out, "CSV report");
    eval->add_option("--per-sample", per_sample, "per-sample CSV");

    auto* bench = app.add_subcommand("bench", "Single-threaded forward latency");
    bench->add_option("--ckpt", ckpt);
    bench->add_option("--preset", preset, "ours_small_toy or paper_shape when no checkpoint is given");
    bench->add_option("--iters", iters);
    bench->add_option("--warmup", warmup);
    bench->add_option("--threads", threads);

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic sample stream");
    gen->add_option("--spec", spec)->required();
    gen->add_option("--out", out)->required();
    gen->add_option("--config", config_path, "config for geometry and augmentation");

    auto* exp = app.add_subcommand("export-attn", "Dump a cross-modal attention matrix as CSV");
    exp->add_option("--ckpt", ckpt)->required();
    exp->add_option("--sample", sample)->required();
    exp->add_option("--out", out)->required();
    exp->add_option("--data", data, "dataset spec (default: the config's eval set)");
    exp->add_option("--direction", direction, "kp (keypoint queries) or img (image queries)");
    exp->add_option("--module", module, "cross-modal module index");

    std::size_t every = 100;
    auto* overfit = app.add_subcommand("overfit", "Train and track training-set MPJPE against its step-0 value");
    overfit->add_option("--config", config_path)->required();
    overfit->add_option("--steps", steps, "override config steps");
    overfit->add_option("--every", every, "evaluation interval in steps");
    overfit->add_option("--out", out, "CSV log");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return run_train(config_path, out, steps);
        if (*eval) return run_eval(ckpt, data, out, per_sample);
        if (*bench) return run_bench(ckpt, preset, iters, warmup, threads);
        if (*gen) return run_gen(spec, out, config_path);
        if (*exp) return run_export(ckpt, sample, out, data, direction, module);
        if (*overfit) return run_overfit(config_path, steps, every, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
