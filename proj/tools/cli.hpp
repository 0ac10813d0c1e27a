#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tbve/conditioning.hpp"
#include "tbve/editing.hpp"
#include "tbve/model.hpp"
#include "tbve/training.hpp"

namespace tbve::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kInternalError = 1;
inline constexpr int kUserError = 2;

// Everything a subcommand may read from the config file. The JSON tree
// returned by default_config() is the complete key schema; a config file and
// --set overrides may only replace keys that exist in it.
struct CliConfig {
    std::uint64_t seed = 0;            // drives model init, training and vocoder noise
    std::string corpus = "prepared";   // prepared corpus, relative to --data-dir
    ModelConfig model;                 // phone_inventory comes from the corpus lexicon
    TrainConfig train;
    CrossfadeConfig crossfade;
    bool fuse_raw = false;
    std::string embedder;              // subprocess command; empty selects the statistics provider
    std::string host = "127.0.0.1";
    int port = 8080;
    int workers = 1;
};

nlohmann::json default_config();
nlohmann::json to_json(const CliConfig& c);
CliConfig cli_config_from_json(const nlohmann::json& j);

// Replaces keys of `base` with those of `patch`; unknown keys are errors.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& path = "");
// "a.b.c=value"; the value is parsed as JSON when it parses, else taken as a string.
void apply_override(nlohmann::json& tree, const std::string& assignment);

// Defaults, then the file (if any), then the overrides, then --seed.
CliConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed);

std::filesystem::path resolve(const std::filesystem::path& data_dir, const std::filesystem::path& p);
std::unique_ptr<EmbeddingProvider> make_provider(const CliConfig& c);
// Checkpoint identity shared with the service: "ckpt-" + 12 hex digits of its sha256.
std::string checkpoint_id(std::span<const std::uint8_t> bytes);

struct ToyArgs {
    std::filesystem::path out;
    std::size_t utterances = 6, speakers = 2, min_words = 2, max_words = 4;
};
int make_toy(const ToyArgs& a, const CliConfig& c);

struct PrepareArgs {
    std::filesystem::path data_dir, manifest = "manifest.jsonl", lexicon = "lexicon.txt";
};
int prepare_data(const PrepareArgs& a, const CliConfig& c);

struct TrainArgs {
    std::filesystem::path data_dir, out = "run";
    bool resume = false;
    bool quiet = false;
};
int train(const TrainArgs& a, const CliConfig& c);

struct EditArgs {
    std::filesystem::path data_dir, checkpoint, out = "edit.wav";
    std::string utterance, span, text, original_transcript, durations;
    std::optional<std::string> embedding_mode, ref_mode;
    bool reference_unedited_only = false;
};
int edit(const EditArgs& a, const CliConfig& c);

struct EvalArgs {
    std::filesystem::path data_dir, results, out;
};
int eval(const EvalArgs& a, const CliConfig& c);

struct ExportArgs {
    std::filesystem::path data_dir, out = "embeddings.csv";
};
int export_embeddings(const ExportArgs& a, const CliConfig& c);

struct ServeArgs {
    std::filesystem::path data_dir, lexicon;
};
int serve(const ServeArgs& a, const CliConfig& c);

}  // namespace tbve::cli
