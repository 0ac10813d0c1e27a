#include <iostream>

#include "CLI11.hpp"
#include "cli.hpp"
#include "tbve/error.hpp"
#include "tbve/service.hpp"

using namespace tbve;
namespace fs = std::filesystem;

namespace {

template <class F>
int guarded(F&& run) {
    try {
        return run();
    } catch (const StageError& e) {
        std::cerr << "error in " << e.stage() << ": " << e.detail() << "\n";
        return e.user_error() ? cli::kUserError : cli::kInternalError;
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kUserError;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kUserError;
    } catch (const ServiceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kUserError;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return cli::kInternalError;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-based voice editing toolkit"};
    app.require_subcommand(1);

    fs::path data_dir;
    fs::path config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    app.add_option("--data-dir", data_dir, "Root that all relative paths resolve against")->required();
    app.add_option("--config", config_file, "JSON config file; `tbve config` prints the full key schema");
    app.add_option("--set", overrides, "Dotted override, e.g. --set train.steps=50")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    app.add_option("--seed", seed, "Seed for every random generator");

    auto* config = app.add_subcommand("config", "Print the effective configuration");

    cli::ToyArgs toy;
    auto* make_toy = app.add_subcommand("make-toy", "Write a synthetic corpus (manifest, lexicon, WAVs)");
    make_toy->add_option("--out", toy.out, "Output directory, relative to --data-dir");
    make_toy->add_option("--utterances", toy.utterances);
    make_toy->add_option("--speakers", toy.speakers);
    make_toy->add_option("--min-words", toy.min_words);
    make_toy->add_option("--max-words", toy.max_words);

    cli::PrepareArgs prep;
    auto* prepare = app.add_subcommand("prepare-data", "Align, extract features and embed a manifest");
    prepare->add_option("--manifest", prep.manifest);
    prepare->add_option("--lexicon", prep.lexicon);

    cli::TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train an acoustic model on the prepared corpus");
    train->add_option("--out", tr.out, "Run directory for metrics.jsonl and checkpoint.tbvc");
    train->add_flag("--resume", tr.resume, "Continue from <out>/checkpoint.tbvc");
    train->add_flag("--quiet", tr.quiet);

    cli::EditArgs ed;
    std::string emb_mode, ref_mode;
    auto* edit = app.add_subcommand("edit", "Replace a word span of a prepared recording");
    edit->add_option("--checkpoint", ed.checkpoint)->required();
    edit->add_option("--utterance", ed.utterance)->required();
    edit->add_option("--span", ed.span, "Token range begin:end (end exclusive)")->required();
    edit->add_option("--text", ed.text, "Replacement text; empty deletes the span");
    edit->add_option("--original-transcript", ed.original_transcript);
    edit->add_option("--durations", ed.durations, "Comma-separated frames per replacement phone");
    auto* emb_opt = edit->add_option("--embedding-mode", emb_mode);
    auto* ref_opt = edit->add_option("--ref-mode", ref_mode);
    edit->add_flag("--reference-unedited-only", ed.reference_unedited_only,
                   "Reference encoder sees only the frames outside the span");
    edit->add_option("--out", ed.out, "Output WAV; a .json sidecar is written next to it");

    cli::EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Collect metrics from edit sidecars");
    eval->add_option("--results", ev.results, "Directory of edit sidecars")->required();
    eval->add_option("--out", ev.out, "Metrics JSONL (default <results>/metrics.jsonl)");

    cli::ExportArgs ex;
    auto* exp = app.add_subcommand("export-embeddings", "Write utterance embeddings as CSV");
    exp->add_option("--out", ex.out);

    cli::ServeArgs sv;
    auto* serve = app.add_subcommand("serve", "Run the REST service over --data-dir");
    serve->add_option("--lexicon", sv.lexicon, "Lexicon installed into the data dir when it has none");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? cli::kOk : cli::kUserError;
    }

    return guarded([&] {
        const auto cfg = cli::load_config(config_file.empty() ? fs::path{} : cli::resolve(data_dir, config_file), overrides, seed);
        if (config->parsed()) {
            std::cout << cli::to_json(cfg).dump(2) << "\n";
            return cli::kOk;
        }
        if (make_toy->parsed()) {
            toy.out = cli::resolve(data_dir, toy.out);
            return cli::make_toy(toy, cfg);
        }
        if (prepare->parsed()) {
            prep.data_dir = data_dir;
            return cli::prepare_data(prep, cfg);
        }
        if (train->parsed()) {
            tr.data_dir = data_dir;
            return cli::train(tr, cfg);
        }
        if (edit->parsed()) {
            ed.data_dir = data_dir;
            if (*emb_opt) ed.embedding_mode = emb_mode;
            if (*ref_opt) ed.ref_mode = ref_mode;
            return cli::edit(ed, cfg);
        }
        if (eval->parsed()) {
            ev.data_dir = data_dir;
            return cli::eval(ev, cfg);
        }
        if (exp->parsed()) {
            ex.data_dir = data_dir;
            return cli::export_embeddings(ex, cfg);
        }
        sv.data_dir = data_dir;
        if (!sv.lexicon.empty()) sv.lexicon = cli::resolve(data_dir, sv.lexicon);
        return cli::serve(sv, cfg);
    });
}
