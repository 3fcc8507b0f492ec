#pragma once

#include "hsplat/adam.hpp"
#include "hsplat/dataio.hpp"
#include "hsplat/losses.hpp"
#include "hsplat/renderer.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>

namespace hsplat {

/// Diverged training (non-finite loss).
class TrainingError : public Error {
public:
    using Error::Error;
};

struct LearningRates {
    /// Position rates are multiplied by the scene extent and decayed
    /// exponentially from `position` to `position_final` over training.
    double position = 1.6e-4;
    double position_final = 1.6e-6;
    double rotation = 1e-3;
    double scale = 5e-3;
    double opacity = 0.05;
    double beta = 5e-3;
    double latent = 2.5e-3;
    double table = 1e-2;
    double decoder = 1e-3;

    bool operator==(const LearningRates&) const = default;
};

struct TrainConfig {
    std::int64_t total_iters = 30000;
    std::int64_t warmup_iters = 10000;
    /// Negative means 0.8 * total_iters.
    std::int64_t bce_start_iter = -1;
    bool bce_enabled = true;
    bool mcmc_enabled = true;
    bool beta_enabled = true;
    std::string kernel = "beta";

    int mcmc_cap = 1000000;
    int relocation_period = 100;
    double dead_threshold = 0.005;
    double prune_threshold = 0.01;
    double noise_lr = 5e-3;
    double tangent_fraction = 0.95;
    double gate_k = 100.0;
    double gate_opacity = 0.05;

    double beta_init = 10.0;
    double opacity_init = 0.5;

    LossWeights loss;
    LearningRates lr;

    HashGridConfig hash{1, 1024, 16, 19, 20};
    double hash_init = 1e-4;
    int latent_dim = 4;
    int decoder_width = 256;
    int decoder_layers = 2;

    double kappa = kDefaultKappa;
    int tile_size = 16;
    double t_floor = 1e-4;
    int threads = 1;

    std::uint64_t seed = 0;
    int log_every = 100;

    static TrainConfig paper();
    static TrainConfig desk();

    std::int64_t bce_start() const;
    Phase phase_at(std::int64_t iter) const;
    KernelMode hybrid_kernel() const;
    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

/// Render settings used by training (and by inference on its checkpoints) for a phase.
RenderConfig render_config_for(const TrainConfig& cfg, Phase phase);

/// Serialized form; `from_json` overlays keys onto `base` and rejects unknown keys.
std::string config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text, const TrainConfig& base = {});

/// Nearest neighbours (excluding the point itself), nearest first.
struct Neighbors {
    std::vector<std::uint32_t> index;  // k per point
    std::vector<double> dist2;
    int k = 0;
};
Neighbors nearest_neighbors(const std::vector<Vec3>& points, int k);

/// Seeds surfels from the dataset point cloud (or the scene box when empty).
SurfelCloud initialize_cloud(const Dataset& data, const TrainConfig& cfg, Rng& rng);

/// Radius of the camera rig, used to scale positional learning rates.
double scene_extent(const Dataset& data);

/// Noise gate: near 1 for transparent surfels, near 0 for confident ones.
double noise_gate(double opacity, const TrainConfig& cfg);

/// Adds the tangent-biased Langevin perturbation to every position.
void sgld_noise(SurfelCloud& cloud, const TrainConfig& cfg, Rng& rng);

/// Adam step on positions followed by sgld_noise.
void sgld_step(SurfelCloud& cloud, std::span<const double> position_grads, AdamState& state, double lr,
               const TrainConfig& cfg, Rng& rng);

/// Per-surfel optimizer groups and their row widths.
std::vector<std::pair<std::string, int>> surfel_groups(int latent_dim);

/// Probability-proportional donor draws (indices into the cloud) among surfels
/// with opacity >= threshold.
std::vector<std::uint32_t> sample_donors(const SurfelCloud& cloud, double threshold, std::size_t count, Rng& rng);

/// Opacity each half of a two-way split must take.
double split_opacity(double donor_opacity);

struct RelocationResult {
    std::size_t relocated = 0;
    std::vector<std::uint32_t> dead;
    std::vector<std::uint32_t> donors;
};

/// Moves surfels below the dead threshold onto opacity-sampled donors.
RelocationResult relocate_dead(SurfelCloud& cloud, std::map<std::string, AdamState>& adam, const TrainConfig& cfg,
                               Rng& rng);

/// Removes surfels with opacity below `threshold`; optimizer rows follow.
std::size_t prune(SurfelCloud& cloud, std::map<std::string, AdamState>& adam, double threshold);

/// Warm-up to hybrid handoff: latent slots 0..2 keep the warm-up colour
/// logits, the rest are zeroed along with the latent moments.
void latent_handoff(SurfelCloud& cloud, std::map<std::string, AdamState>& adam);

struct IterationLog {
    std::int64_t iter = 0;
    Phase phase = Phase::warmup;
    LossReport losses;
    double psnr = 0.0;
    std::size_t n_surfels = 0;
    double mean_blends = 0.0;
    std::size_t relocated = 0;
    std::size_t pruned = 0;

    std::string to_json() const;
};

/// The full mutable training state.
struct TrainState {
    SurfelCloud cloud;
    HashGrid grid;
    Decoder decoder;
    std::map<std::string, AdamState> adam;
    std::int64_t iteration = 0;
    Rng rng;
    bool handoff_done = false;
    double extent = 1.0;
};

class Trainer {
public:
    /// Fresh run. When `initial` is given it replaces point-cloud seeding.
    Trainer(const Dataset& data, const TrainConfig& cfg, std::optional<SurfelCloud> initial = std::nullopt);
    /// Resume from a checkpoint; the configuration travels inside it.
    Trainer(const Dataset& data, const Checkpoint& ckpt);

    const TrainConfig& config() const { return cfg_; }
    const TrainState& state() const { return state_; }
    TrainState& state() { return state_; }
    bool done() const { return state_.iteration >= cfg_.total_iters; }
    Phase phase() const { return cfg_.phase_at(state_.iteration); }

    /// Render settings for a phase.
    RenderConfig render_config(Phase phase) const;

    /// One iteration; returns its statistics.
    IterationLog step();

    /// Steps until `until` (or the end); `on_log` sees every log_every-th iteration and the last one.
    void run(std::int64_t until = -1, const std::function<void(const IterationLog&)>& on_log = {});

    Checkpoint checkpoint() const;

    /// Where a diagnostic checkpoint goes if the loss becomes non-finite (empty: none).
    void set_diagnostic_path(const fs::path& p) { diagnostic_path_ = p; }

private:
    double position_lr() const;

    const Dataset& data_;
    TrainConfig cfg_;
    TrainState state_;
    fs::path diagnostic_path_;
};

}  // namespace hsplat
