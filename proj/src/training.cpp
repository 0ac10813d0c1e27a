#include "tbve/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tbve/error.hpp"
#include "tbve/io.hpp"

namespace tbve {

using ag::Matrix;
using ag::Var;

void TrainConfig::validate() const {
    for (double w : {coarse_weight, fine_weight, kl_weight, duration_weight, f0_weight})
        if (!(w >= 0.0)) throw InvalidInput("loss weights must be non-negative");
    if (!(mask_rate_min > 0.0 && mask_rate_min <= mask_rate_max && mask_rate_max <= 1.0))
        throw InvalidInput("mask rate range must satisfy 0 < min <= max <= 1");
    if (!(learning_rate > 0.0)) throw InvalidInput("learning rate must be positive");
    if (warmup_steps < 0 || batch_size < 1 || steps < 0 || checkpoint_every < 0)
        throw InvalidInput("warmup_steps, batch_size, steps and checkpoint_every must be non-negative (batch >= 1)");
    if (grad_clip < 0.0) throw InvalidInput("grad_clip must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0))
        throw InvalidInput("bad Adam hyper-parameters");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"coarse_weight", c.coarse_weight},
            {"fine_weight", c.fine_weight},
            {"kl_weight", c.kl_weight},
            {"duration_weight", c.duration_weight},
            {"f0_weight", c.f0_weight},
            {"mask_rate_range", {c.mask_rate_min, c.mask_rate_max}},
            {"learning_rate", c.learning_rate},
            {"warmup_steps", c.warmup_steps},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"grad_clip", c.grad_clip},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"checkpoint_every", c.checkpoint_every},
            {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "coarse_weight") c.coarse_weight = value.get<double>();
            else if (key == "fine_weight") c.fine_weight = value.get<double>();
            else if (key == "kl_weight") c.kl_weight = value.get<double>();
            else if (key == "duration_weight") c.duration_weight = value.get<double>();
            else if (key == "f0_weight") c.f0_weight = value.get<double>();
            else if (key == "mask_rate_range") {
                const auto r = value.get<std::vector<double>>();
                if (r.size() != 2) throw InvalidInput("mask_rate_range needs two values");
                c.mask_rate_min = r[0];
                c.mask_rate_max = r[1];
            } else if (key == "learning_rate") c.learning_rate = value.get<double>();
            else if (key == "warmup_steps") c.warmup_steps = value.get<int>();
            else if (key == "batch_size") c.batch_size = value.get<int>();
            else if (key == "steps") c.steps = value.get<int>();
            else if (key == "grad_clip") c.grad_clip = value.get<double>();
            else if (key == "adam_beta1") c.adam_beta1 = value.get<double>();
            else if (key == "adam_beta2") c.adam_beta2 = value.get<double>();
            else if (key == "adam_eps") c.adam_eps = value.get<double>();
            else if (key == "checkpoint_every") c.checkpoint_every = value.get<int>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else throw InvalidInput("unknown training config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("bad training config: ") + e.what());
    }
    return c;
}

std::vector<int> MaskSpec::masked_frames() const {
    std::vector<int> rows;
    for (const auto& r : frame_ranges)
        for (std::size_t t = r.start; t < r.end; ++t) rows.push_back(static_cast<int>(t));
    return rows;
}

std::size_t mask_span_length(std::size_t phones, double rate) {
    if (phones < 1) throw InvalidInput("cannot mask an empty phone sequence");
    const double n = std::round(rate * static_cast<double>(phones));
    return static_cast<std::size_t>(std::clamp(n, 1.0, static_cast<double>(phones)));
}

MaskSpec make_mask(std::size_t phones, double rate, std::size_t start) {
    const std::size_t len = mask_span_length(phones, rate);
    if (start + len > phones) throw InvalidInput("mask span exceeds the phone sequence");
    return {rate, start, start + len, {}};
}

MaskSpec sample_mask(std::size_t phones, Rng& rng, double lo, double hi) {
    if (!(lo > 0.0 && lo <= hi && hi <= 1.0)) throw InvalidInput("mask rate range must satisfy 0 < lo <= hi <= 1");
    const double rate = lo == hi ? lo : rng.uniform(lo, hi);
    const std::size_t len = mask_span_length(phones, rate);
    const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(phones - len)));
    return make_mask(phones, rate, start);
}

void attach_frames(MaskSpec& mask, std::span<const int> durations) {
    if (mask.end_phone > durations.size()) throw InvalidInput("mask span exceeds the duration vector");
    std::size_t start = 0;
    for (std::size_t p = 0; p < mask.start_phone; ++p) start += static_cast<std::size_t>(durations[p]);
    std::size_t end = start;
    for (std::size_t p = mask.start_phone; p < mask.end_phone; ++p) end += static_cast<std::size_t>(durations[p]);
    mask.frame_ranges.clear();
    if (end > start) mask.frame_ranges.push_back({start, end});
}

nlohmann::json to_json(const LossBreakdown& b) {
    return {{"coarse", b.coarse}, {"fine", b.fine},         {"kl", b.kl},
            {"duration", b.duration}, {"f0", b.f0}, {"total", b.total},
            {"mask_rate_mean", b.mask_rate_mean}};
}

Loss compute_loss(const Var& coarse, const Var& fine, const Matrix& target, const MaskSpec& mask, const Var& kl,
                  const VarianceHeads& predicted, const VarianceTargets& targets, const TrainConfig& cfg) {
    if (coarse.rows() != target.rows() || fine.rows() != target.rows() || coarse.cols() != target.cols() ||
        fine.cols() != target.cols())
        throw InvalidInput("prediction and target shapes differ");
    for (const auto& r : mask.frame_ranges)
        if (r.end > static_cast<std::size_t>(target.rows()) || r.start > r.end)
            throw InvalidInput("mask frames outside the target");
    const auto rows = mask.masked_frames();
    if (rows.empty()) throw InvalidInput("empty masked region: nothing to train on");

    std::vector<Var> terms;
    LossBreakdown b;
    b.mask_rate_mean = mask.mask_rate;
    auto add = [&](const Var& raw, double weight, double& slot) {
        const Var weighted = ag::scale(raw, weight);
        slot = weighted.item();
        terms.push_back(weighted);
    };
    add(ag::mse_rows(coarse, target, rows), cfg.coarse_weight, b.coarse);
    add(ag::mse_rows(fine, target, rows), cfg.fine_weight, b.fine);
    add(kl, cfg.kl_weight, b.kl);
    if (predicted.log_duration.defined()) {
        std::vector<int> all(static_cast<std::size_t>(targets.log_duration.rows()));
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        add(ag::mse_rows(predicted.log_duration, targets.log_duration, all), cfg.duration_weight, b.duration);
        add(ag::mse_rows(predicted.log_f0, targets.log_f0, all), cfg.f0_weight, b.f0);
    }
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = ag::add(total, terms[i]);
    b.total = total.item();
    return {total, b};
}

void TrainingSet::compute_speaker_embeddings() {
    std::map<std::string, std::vector<UtteranceEmbedding>> by_speaker;
    for (const auto& ex : examples)
        if (ex.utterance_embedding) by_speaker[ex.speaker_id].push_back({*ex.utterance_embedding});
    speakers.clear();
    for (const auto& [spk, utts] : by_speaker) speakers[spk] = speaker_embedding(utts);
}

std::optional<EmbeddingVector> TrainingSet::embedding_for(const TrainingExample& ex, EmbeddingMode mode) const {
    switch (mode) {
        case EmbeddingMode::none: return std::nullopt;
        case EmbeddingMode::utterance:
            if (!ex.utterance_embedding) throw InvalidInput("no utterance embedding for " + ex.id);
            return ex.utterance_embedding;
        case EmbeddingMode::speaker: {
            auto it = speakers.find(ex.speaker_id);
            if (it == speakers.end()) throw InvalidInput("no speaker embedding for speaker '" + ex.speaker_id + "'");
            return it->second.vector;
        }
    }
    return std::nullopt;
}

PreparedExample prepare_example(const AcousticModel& model, const TrainingExample& ex, MaskSpec mask,
                                std::optional<EmbeddingVector> embedding) {
    const std::size_t p = ex.phone_ids.size();
    if (ex.durations.size() != p) throw InvalidInput(ex.id + ": one duration per phone required");
    std::size_t frames = 0;
    for (int d : ex.durations) frames += static_cast<std::size_t>(d);
    if (frames != ex.features.frames()) throw AlignmentError(ex.id + ": alignment/feature length mismatch");
    attach_frames(mask, ex.durations);

    PreparedExample out;
    out.target = model.to_model(ex.features);
    auto& in = out.inputs;
    in.phone_ids = ex.phone_ids;
    in.durations = ex.durations;
    in.phone_log_f0 = phone_log_f0(ex.features, ex.durations);
    in.phone_masked.assign(p, false);
    for (std::size_t i = mask.start_phone; i < mask.end_phone; ++i) in.phone_masked[i] = true;
    in.context = out.target;
    in.frame_masked.assign(frames, false);
    for (int t : mask.masked_frames()) {
        in.context.row(t).setZero();
        in.frame_masked[static_cast<std::size_t>(t)] = true;
    }
    in.conditioning.embedding = embedding;
    if (model.config().ref_mode != RefMode::none) in.conditioning.reference_features = out.target;

    out.variance.log_duration.resize(static_cast<Eigen::Index>(p), 1);
    out.variance.log_f0.resize(static_cast<Eigen::Index>(p), 1);
    for (std::size_t i = 0; i < p; ++i) {
        out.variance.log_duration(static_cast<Eigen::Index>(i), 0) = duration_target(ex.durations[i]);
        out.variance.log_f0(static_cast<Eigen::Index>(i), 0) = in.phone_log_f0[i];
    }
    out.mask = std::move(mask);
    return out;
}

Trainer::Trainer(AcousticModel& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    for (const auto& [name, p] : model_.parameters().parameters()) {
        adam_.m.push_back(Matrix::Zero(p.rows(), p.cols()));
        adam_.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
}

double Trainer::learning_rate(std::uint64_t step) const {
    if (cfg_.warmup_steps == 0 || step == 0) return cfg_.learning_rate;
    const double s = static_cast<double>(step), w = cfg_.warmup_steps;
    return cfg_.learning_rate * std::min(s / w, std::sqrt(w / s));
}

LossBreakdown Trainer::train_step(std::vector<const TrainingExample*> batch, const TrainingSet& set, Rng& rng) {
    if (batch.empty()) throw InvalidInput("empty batch");
    std::sort(batch.begin(), batch.end(), [](auto* a, auto* b) { return a->id < b->id; });
    auto& store = model_.parameters();
    store.zero_grad();
    const nn::Mode mode{.training = true, .rng = &rng};
    const double inv = 1.0 / static_cast<double>(batch.size());
    LossBreakdown sum;
    std::vector<Var> totals;
    for (const auto* ex : batch) {
        MaskSpec mask;
        for (int attempt = 0;; ++attempt) {
            mask = sample_mask(ex->phone_ids.size(), rng, cfg_.mask_rate_min, cfg_.mask_rate_max);
            attach_frames(mask, ex->durations);
            if (!mask.frame_ranges.empty()) break;
            if (attempt == 32) throw InvalidInput(ex->id + ": no mask with a non-empty frame region");
        }
        const auto prepared = prepare_example(model_, *ex, mask, set.embedding_for(*ex, model_.config().embedding_mode));
        const auto out = model_.forward(prepared.inputs, mode);
        const auto loss = compute_loss(out.decoded.coarse, out.decoded.fine, prepared.target, prepared.mask, out.kl,
                                       out.variance, prepared.variance, cfg_);
        totals.push_back(ag::scale(loss.total, inv));
        const auto& b = loss.breakdown;
        sum.coarse += b.coarse * inv;
        sum.fine += b.fine * inv;
        sum.kl += b.kl * inv;
        sum.duration += b.duration * inv;
        sum.f0 += b.f0 * inv;
        sum.mask_rate_mean += b.mask_rate_mean * inv;
    }
    Var total = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) total = ag::add(total, totals[i]);
    sum.total = total.item();
    if (!std::isfinite(sum.total)) {
        std::string ids;
        for (const auto* ex : batch) ids += (ids.empty() ? "" : ",") + ex->id;
        throw NumericError("non-finite loss at step " + std::to_string(adam_.step + 1) + " on batch [" + ids + "]");
    }
    ag::backward(total);

    const auto& params = store.parameters();
    double norm2 = 0.0;
    for (const auto& [name, p] : params)
        if (p.grad().size()) norm2 += p.grad().squaredNorm();
    const double clip = (cfg_.grad_clip > 0.0 && norm2 > cfg_.grad_clip * cfg_.grad_clip)
                            ? cfg_.grad_clip / std::sqrt(norm2)
                            : 1.0;
    ++adam_.step;
    const double lr = learning_rate(adam_.step);
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Var p = params[i].second;
        if (!p.grad().size()) continue;
        const Matrix g = p.grad() * clip;
        adam_.m[i] = nn::round_to_float(b1 * adam_.m[i] + (1.0 - b1) * g);
        adam_.v[i] = nn::round_to_float(b2 * adam_.v[i] + (1.0 - b2) * g.cwiseProduct(g));
        const Matrix update =
            ((adam_.m[i] / c1).array() / ((adam_.v[i] / c2).array().sqrt() + cfg_.adam_eps)).matrix();
        p.mutable_value() = nn::round_to_float(p.value() - lr * update);
    }
    store.zero_grad();
    return sum;
}

double Trainer::masked_fine_mse(const TrainingExample& ex, const MaskSpec& mask, const TrainingSet& set) {
    ag::NoGradGuard guard;
    const auto prepared = prepare_example(model_, ex, mask, set.embedding_for(ex, model_.config().embedding_mode));
    const auto rows = prepared.mask.masked_frames();
    if (rows.empty()) throw InvalidInput("empty masked region");
    const auto out = model_.forward(prepared.inputs, {});
    return ag::mse_rows(out.decoded.fine, prepared.target, rows).item();
}

namespace {

constexpr std::string_view kMagic = "TBVECKPT";

void write_tensor(io::ByteWriter& w, const Matrix& m) {
    std::vector<float> buf(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    w.f32s(buf);
}

Matrix read_tensor(io::ByteReader& r, Eigen::Index rows, Eigen::Index cols) {
    std::vector<float> buf(static_cast<std::size_t>(rows * cols));
    r.f32s(buf);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = buf[static_cast<std::size_t>(i)];
    return m;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const AcousticModel& model, const AdamState* optimizer,
                                            std::uint64_t step, const std::string& rng_state,
                                            const nlohmann::json& train_config) {
    io::ByteWriter w;
    w.text(kMagic);
    w.u32(kCheckpointSchema);
    const nlohmann::json header{{"model", to_json(model.config())},
                                {"train", train_config},
                                {"step", step},
                                {"rng_state", rng_state}};
    const std::string text = header.dump();
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.text(text);
    const auto& store = model.parameters();
    w.u32(static_cast<std::uint32_t>(store.parameters().size() + store.buffers().size()));
    auto entry = [&](std::uint32_t kind, const std::string& name, const Var& v) {
        w.u32(kind);
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.text(name);
        w.u32(static_cast<std::uint32_t>(v.rows()));
        w.u32(static_cast<std::uint32_t>(v.cols()));
        write_tensor(w, v.value());
    };
    for (const auto& [name, v] : store.parameters()) entry(0, name, v);
    for (const auto& [name, v] : store.buffers()) entry(1, name, v);
    w.u32(optimizer ? 1 : 0);
    if (optimizer) {
        if (optimizer->m.size() != store.parameters().size()) throw InvalidInput("optimizer state does not match model");
        w.u64(optimizer->step);
        for (std::size_t i = 0; i < optimizer->m.size(); ++i) {
            write_tensor(w, optimizer->m[i]);
            write_tensor(w, optimizer->v[i]);
        }
    }
    w.u64(io::fnv1a64(w.data()));
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagic.size() + 4 + 8) throw CheckpointError("checkpoint is truncated");
    io::ByteReader r(bytes);
    if (r.text(kMagic.size()) != kMagic) throw CheckpointError("not a checkpoint archive (bad magic)");
    const std::uint32_t schema = r.u32();
    if (schema != kCheckpointSchema)
        throw CheckpointVersionError("checkpoint schema version " + std::to_string(schema) + " is not supported (expected " +
                                     std::to_string(kCheckpointSchema) + ")");
    const auto body = bytes.first(bytes.size() - 8);
    io::ByteReader tail(bytes.subspan(bytes.size() - 8));
    if (tail.u64() != io::fnv1a64(body)) throw CheckpointError("checkpoint checksum mismatch (corrupted archive)");
    try {
        const auto header = nlohmann::json::parse(r.text(r.u32()));
        Checkpoint ck;
        ck.model = std::make_unique<AcousticModel>(model_config_from_json(header.at("model")));
        ck.train_config = header.at("train");
        ck.step = header.at("step").get<std::uint64_t>();
        ck.rng_state = header.at("rng_state").get<std::string>();
        auto& store = ck.model->parameters();
        const std::uint32_t count = r.u32();
        if (count != store.parameters().size() + store.buffers().size())
            throw CheckpointError("checkpoint tensor count does not match its model config");
        for (std::uint32_t i = 0; i < count; ++i) {
            r.u32();
            const std::string name = r.text(r.u32());
            const Eigen::Index rows = r.u32(), cols = r.u32();
            Var v = store.find(name);
            if (v.rows() != rows || v.cols() != cols) throw CheckpointError("shape mismatch for tensor " + name);
            v.mutable_value() = read_tensor(r, rows, cols);
        }
        if (r.u32() == 1) {
            AdamState a;
            a.step = r.u64();
            for (const auto& [name, p] : store.parameters()) {
                a.m.push_back(read_tensor(r, p.rows(), p.cols()));
                a.v.push_back(read_tensor(r, p.rows(), p.cols()));
            }
            ck.optimizer = std::move(a);
        }
        if (r.remaining() != 8) throw CheckpointError("trailing bytes in checkpoint");
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    } catch (const CheckpointError&) {
        throw;
    } catch (const InvalidInput& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const AcousticModel& model, const AdamState* optimizer,
                     std::uint64_t step, const std::string& rng_state, const nlohmann::json& train_config) {
    io::write_file_atomic(path, encode_checkpoint(model, optimizer, step, rng_state, train_config));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

void run_training(Trainer& trainer, const TrainingSet& set, const TrainRun& run) {
    if (set.examples.empty()) throw InvalidInput("training set is empty");
    const auto& cfg = trainer.config();
    Rng rng(cfg.seed);
    if (!run.rng_state.empty()) rng.set_state(run.rng_state);
    std::filesystem::create_directories(run.out_dir);
    std::ofstream metrics(run.out_dir / "metrics.jsonl", run.start_step ? std::ios::app : std::ios::trunc);
    if (!metrics) throw InvalidInput("cannot write metrics to " + run.out_dir.string());
    const auto checkpoint = [&](std::uint64_t step) {
        save_checkpoint(run.out_dir / "checkpoint.tbvc", trainer.model(), &trainer.optimizer(), step, rng.state(),
                        to_json(cfg));
    };
    const std::size_t n = set.examples.size();
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
    std::vector<std::size_t> order(n);
    for (std::uint64_t step = run.start_step + 1; step <= static_cast<std::uint64_t>(cfg.steps); ++step) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::vector<const TrainingExample*> picked;
        for (std::size_t i = 0; i < batch; ++i) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
            std::swap(order[i], order[j]);
            picked.push_back(&set.examples[order[i]]);
        }
        const auto b = trainer.train_step(std::move(picked), set, rng);
        auto line = to_json(b);
        line["step"] = step;
        line["learning_rate"] = trainer.learning_rate(step);
        metrics << line.dump() << '\n' << std::flush;
        const bool stop = run.on_step && !run.on_step(step, b);
        if (stop || step == static_cast<std::uint64_t>(cfg.steps) ||
            (cfg.checkpoint_every > 0 && step % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0))
            checkpoint(step);
        if (stop) break;
    }
}

}  // namespace tbve
