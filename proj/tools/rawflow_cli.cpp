// Command-line entry point wiring the library into reproducible workflows.
// Exit codes: 0 success, 1 numeric/verification failure, 2 usage/I-O error.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/checkpoint.hpp"
#include "rawflow/config.hpp"
#include "rawflow/curator.hpp"
#include "rawflow/evalkit.hpp"
#include "rawflow/generate.hpp"
#include "rawflow/gradcheck.hpp"
#include "rawflow/loudness.hpp"
#include "rawflow/spectrogram_png.hpp"
#include "rawflow/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rawflow;

namespace {

std::vector<double> parse_freq_list(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string field;
    while (std::getline(is, field, ',')) {
        try {
            out.push_back(std::stod(field));
        } catch (const std::exception&) {
            throw parse_error("bad frequency list entry '" + field + "'");
        }
    }
    if (out.empty()) throw parse_error("empty frequency list");
    return out;
}

std::string join_freqs(const std::vector<double>& freqs) {
    std::ostringstream os;
    for (std::size_t i = 0; i < freqs.size(); ++i) {
        if (i) os << ',';
        os << freqs[i];
    }
    return os.str();
}

const std::vector<std::string> kConfigKeys = {
    "model.d", "model.heads", "model.l_joint", "model.l_fused",
    "model.samples_per_token", "model.pred_mode", "model.rope_base", "model.mlp_ratio",
    "model.rope_in_fused", "model.n_clip", "model.n_sync", "model.d_v", "model.d_s",
    "model.d_t", "model.num_classes",
    "train.lr", "train.beta1", "train.beta2", "train.weight_decay",
    "train.warmup_steps", "train.clip_norm", "train.ema_decay", "train.batch_size",
    "train.steps", "train.seed", "train.loss_mode", "train.p_drop_visual",
    "train.p_drop_text", "train.t_location", "train.t_scale", "train.t_shift",
    "data.class_freqs", "data.tone_amp", "data.click_amp", "data.max_events",
    "data.clip_len", "data.sample_rate", "data.size",
};

ModelConfig model_from_config(const Config& cfg) {
    ModelConfig mc;
    mc.d = static_cast<std::size_t>(cfg.get_int("model.d", 32));
    mc.heads = static_cast<std::size_t>(cfg.get_int("model.heads", 4));
    mc.l_joint = static_cast<std::size_t>(cfg.get_int("model.l_joint", 1));
    mc.l_fused = static_cast<std::size_t>(cfg.get_int("model.l_fused", 2));
    mc.samples_per_token = static_cast<std::size_t>(cfg.get_int("model.samples_per_token", 8));
    const std::string pm = cfg.get_string("model.pred_mode", "x");
    if (pm == "x")
        mc.pred_mode = PredMode::x_pred;
    else if (pm == "v")
        mc.pred_mode = PredMode::v_pred;
    else
        throw parse_error("model.pred_mode must be 'x' or 'v'");
    mc.rope_base = cfg.get_double("model.rope_base", 10000.0);
    mc.mlp_ratio = static_cast<std::size_t>(cfg.get_int("model.mlp_ratio", 4));
    mc.rope_in_fused = cfg.get_bool("model.rope_in_fused", true);
    mc.enc.n_clip = static_cast<std::size_t>(cfg.get_int("model.n_clip", 8));
    mc.enc.n_sync = static_cast<std::size_t>(cfg.get_int("model.n_sync", 8));
    mc.enc.d_v = static_cast<std::size_t>(cfg.get_int("model.d_v", 16));
    mc.enc.d_s = static_cast<std::size_t>(cfg.get_int("model.d_s", 16));
    mc.enc.d_t = static_cast<std::size_t>(cfg.get_int("model.d_t", 16));
    mc.enc.num_classes = static_cast<int>(cfg.get_int("model.num_classes", 4));
    mc.check();
    return mc;
}

TrainConfig train_from_config(const Config& cfg) {
    TrainConfig tc;
    tc.lr = cfg.get_double("train.lr", 3e-3);
    tc.beta1 = cfg.get_double("train.beta1", 0.9);
    tc.beta2 = cfg.get_double("train.beta2", 0.95);
    tc.weight_decay = cfg.get_double("train.weight_decay", 0.0);
    tc.warmup_steps = static_cast<int>(cfg.get_int("train.warmup_steps", 100));
    tc.clip_norm = cfg.get_double("train.clip_norm", 1.0);
    tc.ema_decay = cfg.get_double("train.ema_decay", 0.99);
    tc.batch_size = static_cast<int>(cfg.get_int("train.batch_size", 16));
    tc.steps = static_cast<int>(cfg.get_int("train.steps", 2000));
    tc.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 1));
    const std::string lm = cfg.get_string("train.loss_mode", "v");
    if (lm == "v")
        tc.loss_mode = LossMode::v_loss;
    else if (lm == "x")
        tc.loss_mode = LossMode::x_loss;
    else
        throw parse_error("train.loss_mode must be 'v' or 'x'");
    tc.p_drop_visual = cfg.get_double("train.p_drop_visual", 0.1);
    tc.p_drop_text = cfg.get_double("train.p_drop_text", 0.1);
    tc.timestep.location = cfg.get_double("train.t_location", 0.0);
    tc.timestep.scale = cfg.get_double("train.t_scale", 1.0);
    tc.timestep.shift = cfg.get_double("train.t_shift", 1.0);
    tc.check();
    return tc;
}

ToyDatasetSpec data_from_config(const Config& cfg, int num_classes) {
    ToyDatasetSpec ds;
    ds.num_classes = num_classes;
    ds.class_freqs = parse_freq_list(cfg.get_string("data.class_freqs", "1000,2000,3000,4000"));
    ds.tone_amp = cfg.get_double("data.tone_amp", 0.5);
    ds.click_amp = cfg.get_double("data.click_amp", 0.15);
    ds.max_events = static_cast<int>(cfg.get_int("data.max_events", 2));
    ds.clip_len = cfg.get_double("data.clip_len", 0.016);
    ds.sample_rate = static_cast<int>(cfg.get_int("data.sample_rate", 16000));
    ds.size = static_cast<int>(cfg.get_int("data.size", 64));
    ds.check();
    return ds;
}

std::vector<std::string> list_wavs(const std::string& dir) {
    if (!fs::is_directory(dir)) throw io_error("not a directory: " + dir);
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".wav")
            out.push_back(e.path().string());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw io_error("no .wav files in " + dir);
    return out;
}

// ---- subcommands -------------------------------------------------------

int cmd_preprocess(const std::string& in, const std::string& out, double r_star,
                   double s_a, bool no_rms) {
    WaveformBuffer wav = read_wav(in);
    const double rms_before = rms(wav);
    LiftConfig lift;
    lift.r_star = r_star;
    lift.s_a = s_a;
    if (no_rms) lift.rms_floor = 1e18;  // skip the RMS ratio, clamp+scale only
    WaveformBuffer lifted = amplitude_lift(wav, lift);
    const double rms_after = rms(lifted);
    write_wav_f32(lifted, out);
    json sidecar = {{"rms_before", rms_before}, {"rms_after", rms_after},
                    {"r_star", r_star}, {"s_a", s_a}};
    std::ofstream sf(out + ".json");
    if (!sf) throw io_error("cannot open " + out + ".json");
    sf << sidecar.dump(2) << '\n';
    std::printf("preprocess: rms %.6f -> %.6f, wrote %s\n", rms_before, rms_after,
                out.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir) {
    Config cfg = config_path.empty() ? Config() : Config::load(config_path);
    for (const auto& o : overrides) cfg.set_pair(o);
    const auto unknown = cfg.unknown_keys(kConfigKeys);
    if (!unknown.empty()) throw parse_error("unknown config key: " + unknown.front());

    ModelConfig mc = model_from_config(cfg);
    TrainConfig tc = train_from_config(cfg);
    ToyDatasetSpec ds = data_from_config(cfg, mc.enc.num_classes);

    fs::create_directories(out_dir);
    const std::string csv_path = (fs::path(out_dir) / "loss.csv").string();
    TrainResult result = run_training(mc, ds, tc, csv_path);

    Checkpoint ckpt;
    ckpt.config = mc;
    ckpt.params = std::move(result.params);
    ckpt.ema = std::move(result.ema);
    ckpt.meta["data.sample_rate"] = std::to_string(ds.sample_rate);
    ckpt.meta["data.clip_len"] = std::to_string(ds.clip_len);
    ckpt.meta["data.class_freqs"] = join_freqs(ds.class_freqs);
    ckpt.meta["data.seed"] = std::to_string(tc.seed);
    const std::string ck_path = (fs::path(out_dir) / "checkpoint.rfck").string();
    save_checkpoint(ckpt, ck_path);
    std::printf("train: %d steps, final loss %.6f, wrote %s\n", tc.steps,
                result.log.back().loss, ck_path.c_str());
    return 0;
}

int cmd_generate(const std::string& ck_path, const std::string& manifest,
                 const std::string& out_dir, int steps, double cfg_scale,
                 const std::string& mode, std::uint64_t seed, int c_tokens, bool use_ema) {
    if (mode != "vt2a" && mode != "t2a")
        throw precondition_error("--mode must be vt2a or t2a");
    Checkpoint ckpt = load_checkpoint(ck_path);
    const ModelParams& params = use_ema ? ckpt.ema : ckpt.params;
    const int sample_rate = std::stoi(ckpt.meta.at("data.sample_rate"));
    const double clip_len = std::stod(ckpt.meta.at("data.clip_len"));
    const std::uint64_t bundle_seed = std::stoull(ckpt.meta.at("data.seed"));
    if (c_tokens <= 0)
        c_tokens = static_cast<int>(
            (static_cast<std::size_t>(std::lround(clip_len * sample_rate)) +
             ckpt.config.samples_per_token - 1) /
            ckpt.config.samples_per_token);

    std::ifstream mf(manifest);
    if (!mf) throw io_error("cannot open manifest " + manifest);
    SamplerConfig sc;
    sc.steps = steps;
    sc.cfg_scale = cfg_scale;
    sc.check();
    fs::create_directories(out_dir);
    Rng rng(seed);
    std::string line;
    int idx = 0;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        EventSpec ev = EventSpec::from_line(line, clip_len);
        if (ev.class_id >= ckpt.config.enc.num_classes)
            throw precondition_error("manifest class id exceeds model classes");
        ConditionBundle bundle = make_bundle(ev, ckpt.config.enc, bundle_seed);
        if (mode == "t2a") bundle = force_t2a(bundle);
        WaveformBuffer wav =
            generate_waveform(ckpt.config, params, bundle, sc, rng,
                              static_cast<std::size_t>(c_tokens), sample_rate);
        char name[64];
        std::snprintf(name, sizeof name, "clip_%04d", idx);
        const std::string base = (fs::path(out_dir) / name).string();
        write_wav(wav, base + ".wav");
        write_spectrogram_png(wav, base + ".png");
        ++idx;
    }
    if (idx == 0) throw io_error("manifest is empty: " + manifest);
    std::printf("generate: wrote %d clips to %s\n", idx, out_dir.c_str());
    return 0;
}

int cmd_evaluate(const std::string& gen_dir, const std::string& ref_dir,
                 const std::string& embedder_name, const std::string& freqs,
                 const std::string& report_path) {
    if (embedder_name != "mel") throw precondition_error("unknown embedder: " + embedder_name);
    std::vector<WaveformBuffer> gen, ref;
    for (const auto& p : list_wavs(gen_dir)) gen.push_back(read_wav(p));
    for (const auto& p : list_wavs(ref_dir)) ref.push_back(read_wav(p));

    MelEmbedder mel;
    // short toy clips need a frame that fits
    std::size_t min_len = gen[0].samples.size();
    for (const auto& c : ref) min_len = std::min(min_len, c.samples.size());
    while (mel.n_fft > min_len && mel.n_fft > 32) {
        mel.n_fft /= 2;
        mel.hop /= 2;
    }
    const EmbeddingStats gs = gaussian_stats(embed_clips(gen, mel));
    const EmbeddingStats rs = gaussian_stats(embed_clips(ref, mel));
    const double fd = frechet_distance(gs, rs);

    const std::vector<double> class_freqs = parse_freq_list(freqs);
    const PosteriorSet pg = tone_posteriors(gen, class_freqs);
    const PosteriorSet pr = tone_posteriors(ref, class_freqs);
    if (pg.count() != pr.count())
        throw precondition_error("paired KL needs equal clip counts (" +
                                 std::to_string(pg.count()) + " vs " +
                                 std::to_string(pr.count()) + ")");
    const double kl = paired_kl(pg, pr);
    const double is = inception_score(pg);

    json report = {{"fd", fd},
                   {"kl", kl},
                   {"is", is},
                   {"embedder", embedder_name},
                   {"gen_count", gen.size()},
                   {"ref_count", ref.size()}};
    if (!report_path.empty()) {
        std::ofstream rf(report_path);
        if (!rf) throw io_error("cannot open " + report_path);
        rf << report.dump(2) << '\n';
    }
    std::cout << report.dump(2) << '\n';
    return 0;
}

int cmd_curate(const std::string& manifest, const std::string& out_path,
               double max_silence, double threshold, bool augment, long balance_target,
               std::uint64_t seed, double clip_len) {
    std::ifstream mf(manifest);
    if (!mf) throw io_error("cannot open manifest " + manifest);
    FilterRules rules;
    rules.max_silence_fraction = max_silence;
    rules.silence_amp_threshold = threshold;
    rules.check();

    std::vector<ClipRecord> pool;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw parse_error("manifest line needs 'path,label': " + line);
        const std::string path = line.substr(0, comma);
        const std::string label = line.substr(comma + 1);
        WaveformBuffer wav = read_wav(path);
        std::vector<ClipRecord> clips;
        if (augment && wav.duration_s() >= clip_len + 1.0)
            clips = augment_overlap(wav, path, label, clip_len);
        else
            clips = segment_stream(wav, path, label, clip_len);
        pool.insert(pool.end(), clips.begin(), clips.end());
    }
    if (pool.empty()) throw io_error("no clips extracted from " + manifest);
    apply_filters(pool, rules);

    if (balance_target > 0) {
        std::map<std::string, double> ref;
        for (const auto& rec : pool) ref[rec.label] = 1.0;  // uniform reference
        Rng rng(seed);
        bool shortfall = false;
        const auto kept = balance_categories(pool, ref, static_cast<std::size_t>(balance_target),
                                             rng, &shortfall);
        if (shortfall) std::fprintf(stderr, "curate: balancing shortfall, pool too small\n");
        // records not selected by the balancer get a reason
        std::vector<bool> selected(pool.size(), false);
        for (const auto& k : kept)
            for (std::size_t i = 0; i < pool.size(); ++i)
                if (!selected[i] && pool[i].source_id == k.source_id &&
                    pool[i].offset == k.offset) {
                    selected[i] = true;
                    break;
                }
        for (std::size_t i = 0; i < pool.size(); ++i)
            if (pool[i].accepted() && !selected[i]) pool[i].reject_reason = "balance";
    }

    std::ofstream of(out_path);
    if (!of) throw io_error("cannot open " + out_path);
    std::size_t accepted = 0;
    for (const auto& rec : pool) {
        of << rec.source_id << ',' << rec.offset << ',' << rec.label << ','
           << (rec.accepted() ? "accepted" : "rejected") << ',' << rec.reject_reason << '\n';
        if (rec.accepted()) ++accepted;
    }
    std::printf("curate: %zu/%zu clips accepted, wrote %s\n", accepted, pool.size(),
                out_path.c_str());
    return 0;
}

int cmd_gradcheck(std::size_t d, std::size_t heads, std::size_t l_joint, std::size_t l_fused,
                  std::size_t D, std::size_t C, double tol, double inject_error) {
    GradCheckConfig gc;
    gc.model.d = d;
    gc.model.heads = heads;
    gc.model.l_joint = l_joint;
    gc.model.l_fused = l_fused;
    gc.model.samples_per_token = D;
    gc.c_tokens = C;
    gc.tol = tol;
    gc.inject_error = inject_error;
    const GradCheckReport rep = run_gradcheck(gc);
    for (const auto& [name, rel] : rep.group_max_rel)
        std::printf("%-24s max rel err %.3e\n", name.c_str(), rel);
    std::printf("gradcheck: max %.3e in %s -> %s\n", rep.max_rel, rep.worst_group.c_str(),
                rep.pass ? "PASS" : "FAIL");
    return rep.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"raw-waveform flow-matching toolkit"};
    app.require_subcommand(1);

    // preprocess
    auto* pre = app.add_subcommand("preprocess", "amplitude-lift a WAV file");
    std::string pre_in, pre_out;
    double pre_rstar = 0.33, pre_scale = 3.0;
    bool pre_norms = false;
    pre->add_option("input", pre_in)->required();
    pre->add_option("output", pre_out)->required();
    pre->add_option("--r-star", pre_rstar, "target RMS before scaling");
    pre->add_option("--scale", pre_scale, "global amplitude scale");
    pre->add_flag("--no-rms", pre_norms, "skip RMS normalization (clamp+scale only)");

    // train
    auto* tr = app.add_subcommand("train", "deterministic toy-scale training");
    std::string tr_config, tr_out = "runs/toy";
    std::vector<std::string> tr_set;
    tr->add_option("--config", tr_config, "key=value config file");
    tr->add_option("--set", tr_set, "override key=value (repeatable)");
    tr->add_option("--out", tr_out, "output directory");

    // generate
    auto* gen = app.add_subcommand("generate", "sample clips from a checkpoint");
    std::string gen_ck, gen_manifest, gen_out = "generated", gen_mode = "vt2a";
    int gen_steps = 50, gen_c = 0;
    double gen_cfg = 4.5;
    std::uint64_t gen_seed = 0;
    bool gen_live = false;
    gen->add_option("--checkpoint", gen_ck)->required();
    gen->add_option("--manifest", gen_manifest, "event lines: class_id,t1,t2,...")->required();
    gen->add_option("--out", gen_out);
    gen->add_option("--steps", gen_steps, "Euler steps");
    gen->add_option("--cfg", gen_cfg, "guidance scale");
    gen->add_option("--mode", gen_mode, "vt2a or t2a");
    gen->add_option("--seed", gen_seed);
    gen->add_option("--tokens", gen_c, "token count override");
    gen->add_flag("--live", gen_live, "use live weights instead of EMA");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "distribution metrics over two clip sets");
    std::string ev_gen, ev_ref, ev_emb = "mel", ev_freqs = "1000,2000,3000,4000",
                ev_report;
    ev->add_option("--gen", ev_gen)->required();
    ev->add_option("--ref", ev_ref)->required();
    ev->add_option("--embedder", ev_emb);
    ev->add_option("--class-freqs", ev_freqs, "tone-class frequencies for posteriors");
    ev->add_option("--report", ev_report, "write JSON report here");

    // curate
    auto* cu = app.add_subcommand("curate", "filter and balance a clip manifest");
    std::string cu_manifest, cu_out = "curated.txt";
    double cu_silence = 0.8, cu_threshold = 1e-3, cu_clip = 8.0;
    bool cu_augment = false;
    long cu_balance = 0;
    std::uint64_t cu_seed = 0;
    cu->add_option("--manifest", cu_manifest, "lines: path,label")->required();
    cu->add_option("--out", cu_out);
    cu->add_option("--max-silence", cu_silence);
    cu->add_option("--threshold", cu_threshold, "silence amplitude threshold");
    cu->add_option("--clip-len", cu_clip, "clip length in seconds");
    cu->add_flag("--augment", cu_augment, "overlapping chunks for long sources");
    cu->add_option("--balance", cu_balance, "target total after balancing");
    cu->add_option("--seed", cu_seed);

    // gradcheck
    auto* gcc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::size_t gc_d = 16, gc_heads = 2, gc_lj = 1, gc_lf = 1, gc_D = 4, gc_C = 8;
    double gc_tol = 1e-3, gc_inject = 0.0;
    gcc->add_option("--d", gc_d);
    gcc->add_option("--heads", gc_heads);
    gcc->add_option("--l-joint", gc_lj);
    gcc->add_option("--l-fused", gc_lf);
    gcc->add_option("--samples-per-token", gc_D);
    gcc->add_option("--tokens", gc_C);
    gcc->add_option("--tol", gc_tol);
    gcc->add_option("--inject-error", gc_inject, "negative-control perturbation");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) return cmd_preprocess(pre_in, pre_out, pre_rstar, pre_scale, pre_norms);
        if (tr->parsed()) return cmd_train(tr_config, tr_set, tr_out);
        if (gen->parsed())
            return cmd_generate(gen_ck, gen_manifest, gen_out, gen_steps, gen_cfg, gen_mode,
                                gen_seed, gen_c, !gen_live);
        if (ev->parsed()) return cmd_evaluate(ev_gen, ev_ref, ev_emb, ev_freqs, ev_report);
        if (cu->parsed())
            return cmd_curate(cu_manifest, cu_out, cu_silence, cu_threshold, cu_augment,
                              cu_balance, cu_seed, cu_clip);
        if (gcc->parsed())
            return cmd_gradcheck(gc_d, gc_heads, gc_lj, gc_lf, gc_D, gc_C, gc_tol, gc_inject);
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 2;
}
