#include "cli.hpp"

#include <csignal>
#include <cstdio>
#include <fstream>
#include <algorithm>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "tbve/corpus.hpp"
#include "tbve/error.hpp"
#include "tbve/eval.hpp"
#include "tbve/io.hpp"
#include "tbve/service.hpp"

namespace tbve::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json model_section(const ModelConfig& m) {
    auto j = to_json(m);
    j.erase("phone_inventory");
    j.erase("init_seed");
    return j;
}

json train_section(const TrainConfig& t) {
    auto j = to_json(t);
    j.erase("seed");
    return j;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string part;
    std::istringstream in(s);
    while (std::getline(in, part, sep)) out.push_back(part);
    return out;
}

std::size_t parse_index(const std::string& s, const std::string& what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (s.empty() || pos != s.size() || s[0] == '-') throw InvalidInput("bad " + what + ": '" + s + "'");
    return static_cast<std::size_t>(v);
}

Corpus load_corpus(const fs::path& data_dir, const CliConfig& c) {
    const auto dir = resolve(data_dir, c.corpus);
    if (!fs::exists(dir / "prepared.jsonl")) throw InvalidInput("no prepared corpus at " + dir.string());
    return Corpus::load(dir);
}

std::string fixed(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
}

}  // namespace

json to_json(const CliConfig& c) {
    return {{"seed", c.seed},
            {"corpus", c.corpus},
            {"model", model_section(c.model)},
            {"train", train_section(c.train)},
            {"edit",
             {{"crossfade_ms", c.crossfade.fade_ms},
              {"crossfade_shape", to_string(c.crossfade.shape)},
              {"fuse_raw", c.fuse_raw}}},
            {"embedding", {{"command", c.embedder}}},
            {"service", {{"host", c.host}, {"port", c.port}, {"workers", c.workers}}}};
}

json default_config() { return to_json(CliConfig{}); }

CliConfig cli_config_from_json(const json& j) {
    CliConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        c.corpus = j.at("corpus").get<std::string>();
        c.model = model_config_from_json(j.at("model"));
        c.train = train_config_from_json(j.at("train"));
        const auto& e = j.at("edit");
        c.crossfade.fade_ms = e.at("crossfade_ms").get<double>();
        c.crossfade.shape = parse_fade_shape(e.at("crossfade_shape").get<std::string>());
        c.fuse_raw = e.at("fuse_raw").get<bool>();
        c.embedder = j.at("embedding").at("command").get<std::string>();
        const auto& s = j.at("service");
        c.host = s.at("host").get<std::string>();
        c.port = s.at("port").get<int>();
        c.workers = s.at("workers").get<int>();
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("config: ") + e.what());
    }
    c.model.init_seed = c.seed;
    c.train.seed = c.seed;
    c.crossfade.validate();
    c.train.validate();
    if (c.port < 0 || c.port > 65535) throw InvalidInput("config: service.port out of range");
    if (c.workers < 1) throw InvalidInput("config: service.workers must be >= 1");
    return c;
}

void merge_strict(json& base, const json& patch, const std::string& path) {
    if (!patch.is_object()) throw InvalidInput("config: " + (path.empty() ? "root" : path) + " must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw InvalidInput("config: unknown key '" + where + "'");
        if (base[key].is_object())
            merge_strict(base[key], value, where);
        else
            base[key] = value;
    }
}

void apply_override(json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidInput("override must look like key.path=value: " + assignment);
    const auto keys = split(assignment.substr(0, eq), '.');
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json patch = value;
    for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = json{{*it, patch}};
    merge_strict(tree, patch);
}

CliConfig load_config(const fs::path& file, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed) {
    json tree = default_config();
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw InvalidInput("cannot read config " + file.string());
        const json loaded = json::parse(in, nullptr, false);
        if (loaded.is_discarded()) throw InvalidInput("config " + file.string() + " is not valid JSON");
        merge_strict(tree, loaded);
    }
    for (const auto& o : overrides) apply_override(tree, o);
    if (seed) tree["seed"] = *seed;
    return cli_config_from_json(tree);
}

fs::path resolve(const fs::path& data_dir, const fs::path& p) { return p.is_absolute() ? p : data_dir / p; }

std::unique_ptr<EmbeddingProvider> make_provider(const CliConfig& c) {
    if (c.embedder.empty()) return std::make_unique<StatisticsEmbeddingProvider>();
    return std::make_unique<SubprocessEmbeddingProvider>(c.embedder);
}

std::string checkpoint_id(std::span<const std::uint8_t> bytes) { return "ckpt-" + io::sha256_hex(bytes).substr(0, 12); }

int make_toy(const ToyArgs& a, const CliConfig& c) {
    ToyCorpusOptions o;
    o.utterances = a.utterances;
    o.speakers = a.speakers;
    o.min_words = a.min_words;
    o.max_words = a.max_words;
    o.seed = c.seed;
    const auto toy = make_toy_corpus(o);
    write_toy_corpus(toy, a.out);
    std::cout << "wrote " << toy.utterances.size() << " utterances to " << a.out.string() << "\n";
    return kOk;
}

int prepare_data(const PrepareArgs& a, const CliConfig& c) {
    const auto provider = make_provider(c);
    const auto out = resolve(a.data_dir, c.corpus);
    const auto report =
        prepare_corpus(resolve(a.data_dir, a.manifest), resolve(a.data_dir, a.lexicon), out, *provider);
    std::cout << "utterances: " << report.utterances << "\n"
              << "speakers: " << report.speakers << "\n"
              << "total_frames: " << report.total_frames << "\n"
              << "unchanged: " << report.skipped_unchanged << "\n"
              << "failed: " << report.failures.size() << "\n";
    for (const auto& [id, why] : report.failures) std::cerr << "record " << id << ": " << why << "\n";
    return report.failures.empty() ? kOk : kUserError;
}

int train(const TrainArgs& a, const CliConfig& c) {
    const auto corpus = load_corpus(a.data_dir, c);
    const auto set = make_training_set(corpus);
    const auto out = resolve(a.data_dir, a.out);
    const auto ckpt_path = out / "checkpoint.tbvc";

    std::unique_ptr<AcousticModel> model;
    TrainRun run;
    run.out_dir = out;
    std::optional<AdamState> optimizer;
    if (a.resume) {
        if (!fs::exists(ckpt_path)) throw InvalidInput("nothing to resume: " + ckpt_path.string() + " missing");
        auto ck = load_checkpoint(ckpt_path);
        if (!ck.optimizer) throw InvalidInput("checkpoint has no optimizer state to resume from");
        if (ck.model->config().phone_inventory != corpus.lexicon().inventory())
            throw InvalidInput("checkpoint phone inventory does not match the corpus lexicon");
        model = std::move(ck.model);
        optimizer = std::move(ck.optimizer);
        run.start_step = ck.step;
        run.rng_state = ck.rng_state;
    } else {
        ModelConfig mc = c.model;
        mc.phone_inventory = corpus.lexicon().inventory();
        model = std::make_unique<AcousticModel>(mc);
        std::vector<VocoderFeatures> features;
        for (const auto& ex : set.examples) features.push_back(ex.features);
        model->set_normalization(features);
    }
    Trainer trainer(*model, c.train);
    if (optimizer) trainer.optimizer() = std::move(*optimizer);
    fs::create_directories(out);
    io::write_text_atomic(out / "config.json", to_json(c).dump(2) + "\n");

    const std::uint64_t total = static_cast<std::uint64_t>(c.train.steps);
    if (run.start_step >= total) {
        std::cout << "already at step " << run.start_step << " of " << total << "\n";
        return kOk;
    }
    const std::uint64_t every = std::max<std::uint64_t>(1, total / 20);
    run.on_step = [&](std::uint64_t step, const LossBreakdown& b) {
        if (!a.quiet && (step % every == 0 || step == total))
            std::cout << "step " << step << "/" << total << "  total " << fixed(b.total) << "  fine "
                      << fixed(b.fine) << "  coarse " << fixed(b.coarse) << std::endl;
        return true;
    };
    run_training(trainer, set, run);
    std::cout << "checkpoint: " << ckpt_path.string() << "\n";
    return kOk;
}

int edit(const EditArgs& a, const CliConfig& c) {
    const auto corpus = load_corpus(a.data_dir, c);
    const auto bytes = io::read_file(resolve(a.data_dir, a.checkpoint));
    auto ck = decode_checkpoint(bytes);
    if (ck.model->config().phone_inventory != corpus.lexicon().inventory())
        throw InvalidInput("checkpoint phone inventory does not match the corpus lexicon");
    if (!corpus.contains(a.utterance)) throw InvalidInput("unknown recording '" + a.utterance + "'");

    EditRequest req;
    req.utterance_id = a.utterance;
    req.original_transcript = a.original_transcript;
    const auto span = split(a.span, ':');
    if (span.size() != 2) throw InvalidInput("--span must be begin:end");
    req.word_begin = parse_index(span[0], "span begin");
    req.word_end = parse_index(span[1], "span end");
    req.replacement_text = a.text;
    if (a.embedding_mode) req.embedding_mode = parse_embedding_mode(*a.embedding_mode);
    if (a.ref_mode) req.ref_mode = parse_ref_mode(*a.ref_mode);
    req.crossfade = c.crossfade;
    req.seed = c.seed;
    req.fuse_raw = c.fuse_raw;
    req.reference_unedited_only = a.reference_unedited_only;
    if (!a.durations.empty()) {
        std::vector<int> d;
        for (const auto& s : split(a.durations, ',')) d.push_back(static_cast<int>(parse_index(s, "duration")));
        req.replacement_durations = std::move(d);
    }

    const auto provider = make_provider(c);
    const FrameSpec spec;
    const BaselineVocoder vocoder(spec);
    const EditContext ctx{*ck.model, corpus, *provider, vocoder, spec, checkpoint_id(bytes)};
    const auto result = tbve::edit(req, ctx);
    const auto out = resolve(a.data_dir, a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_edit_result(out, result);
    std::cout << "wrote " << out.string() << " (" << result.audio.samples.size() << " samples, new region "
              << result.boundary_begin << ".." << result.boundary_end << ")\n";
    const auto m = metrics_record(a.utterance, result.metrics);
    for (const auto& [k, v] : m.items())
        if (k != "edit_id") std::cout << "  " << k << ": " << (v.is_null() ? "n/a" : fixed(v.get<double>())) << "\n";
    return kOk;
}

int eval(const EvalArgs& a, const CliConfig&) {
    const auto dir = resolve(a.data_dir, a.results);
    if (!fs::is_directory(dir)) throw InvalidInput("results directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());

    std::vector<RegionMetrics> metrics;
    std::string rows;
    for (const auto& f : files) {
        std::ifstream in(f);
        const json j = json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("metrics")) continue;
        metrics.push_back(region_metrics_from_json(j["metrics"]));
        rows += metrics_record(f.stem().string(), metrics.back()).dump() + "\n";
    }
    const auto out = a.out.empty() ? dir / "metrics.jsonl" : resolve(a.data_dir, a.out);
    io::write_text_atomic(out, rows);

    const auto summary = summarize(metrics);
    const std::pair<const char*, std::optional<double> RegionMetrics::*> fields[] = {
        {"mcd_db", &RegionMetrics::mcd_db},
        {"f0_rmse_hz", &RegionMetrics::f0_rmse_hz},
        {"vuv_error", &RegionMetrics::vuv_error_rate},
        {"speaker_cosine", &RegionMetrics::speaker_cosine},
        {"boundary_score", &RegionMetrics::boundary_discontinuity},
    };
    std::cout << "edits: " << summary.edits << "\n";
    std::cout << std::left << std::setw(16) << "metric" << std::setw(6) << "n" << "mean\n";
    for (const auto& [name, field] : fields) {
        std::size_t n = 0;
        for (const auto& m : metrics) n += (m.*field).has_value();
        const auto& mean = summary.mean.*field;
        std::cout << std::setw(16) << name << std::setw(6) << n << (mean ? fixed(*mean) : "n/a") << "\n";
    }
    std::cout << "rows: " << out.string() << "\n";
    return kOk;
}

int export_embeddings(const ExportArgs& a, const CliConfig& c) {
    const auto corpus = load_corpus(a.data_dir, c);
    const auto provider = make_provider(c);
    const auto out = resolve(a.data_dir, a.out);
    io::write_text_atomic(out, tbve::export_embeddings(corpus, *provider));
    std::cout << "wrote " << corpus.entries().size() << " embeddings to " << out.string() << "\n";
    return kOk;
}

int serve(const ServeArgs& a, const CliConfig& c) {
    if (!a.lexicon.empty() && !fs::exists(a.data_dir / "lexicon.txt")) {
        fs::create_directories(a.data_dir);
        fs::copy_file(a.lexicon, a.data_dir / "lexicon.txt");
    }
    ServiceConfig sc;
    sc.data_dir = a.data_dir;
    sc.host = c.host;
    sc.port = c.port;
    sc.workers = c.workers;
    sc.embedder = c.embedder;

    // Block the signals before any service thread exists so only sigwait sees them.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    Service service(sc);
    const int port = service.start();
    std::cout << "listening on http://" << sc.host << ":" << port << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    std::cout << "received " << (sig == SIGTERM ? "SIGTERM" : "SIGINT") << ", draining" << std::endl;
    service.stop();
    std::cout << "stopped" << std::endl;
    return kOk;
}

}  // namespace tbve::cli
