#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "latcert/core.hpp"
#include "latcert/latent.hpp"

namespace latcert {

// Binary sum tree over nonnegative masses; O(log n) proportional sampling.
class SumTree {
public:
    explicit SumTree(std::size_t capacity) : capacity_(capacity) {
        size_ = 1;
        while (size_ < capacity) size_ *= 2;
        tree_.assign(2 * size_, 0.0);
    }

    void set(std::size_t i, double mass) {
        if (i >= capacity_) throw std::out_of_range("SumTree::set");
        std::size_t node = size_ + i;
        tree_[node] = mass;
        for (node /= 2; node >= 1; node /= 2) tree_[node] = tree_[2 * node] + tree_[2 * node + 1];
    }

    double get(std::size_t i) const { return tree_[size_ + i]; }
    double total() const { return tree_[1]; }

    // Index whose cumulative mass interval contains u in [0, total).
    std::size_t sample(double u) const {
        if (total() <= 0.0) throw std::runtime_error("SumTree::sample: empty tree");
        std::size_t node = 1;
        while (node < size_) {
            double left = tree_[2 * node];
            if (u < left) {
                node = 2 * node;
            } else {
                u -= left;
                node = 2 * node + 1;
            }
        }
        std::size_t i = node - size_;
        return i < capacity_ ? i : capacity_ - 1;
    }

private:
    std::size_t capacity_;
    std::size_t size_ = 1;
    std::vector<double> tree_;
};

enum class ReplayMode { uniform, bucket, loss };

struct BufferConfig {
    std::size_t capacity = 1'000'000;
    ReplayMode mode = ReplayMode::uniform;
    double varsigma = 0.0;  // 0 => uniform sampling
    double omega = 0.4;     // importance-sampling exponent, annealed to 1 externally
    double x_star = 1.0;    // maximum priority in loss mode
};

struct ReplayEntry {
    Transition transition;
    LatentState latent_hint = 0;
    double priority = 0.0;
    std::uint64_t insert_index = 0;
};

struct SampledBatch {
    std::vector<std::size_t> indices;  // slot indices for later priority updates
    std::vector<const ReplayEntry*> entries;
    std::vector<double> weights;  // max-normalized importance weights
};

class ReplayBuffer {
public:
    explicit ReplayBuffer(BufferConfig config)
        : config_(config), tree_(config.capacity), entries_(config.capacity) {
        if (config.capacity == 0) throw std::invalid_argument("replay: capacity must be positive");
        if (config.varsigma < 0.0 || config.varsigma > 1.0)
            throw std::invalid_argument("replay: varsigma must be in [0,1]");
        if (config.x_star <= 0.0) throw std::invalid_argument("replay: x_star must be positive");
        max_priority_ = config.mode == ReplayMode::loss ? config.x_star : 1.0;
    }

    std::size_t size() const { return size_; }
    const BufferConfig& config() const { return config_; }
    void set_omega(double omega) { config_.omega = omega; }

    void insert(const Transition& tr, LatentState latent_hint) {
        double p;
        if (config_.mode == ReplayMode::bucket) {
            // p = N / b(latent state), using lifetime counts before increment.
            // A never-seen bucket (b = 0) gets the highest mass so new latent
            // states are replayed immediately; counters never decrement.
            long long b = bucket_counts_[latent_hint];
            p = total_inserts_ == 0 ? 1.0
                                    : static_cast<double>(total_inserts_) /
                                          static_cast<double>(std::max(b, 1LL));
            ++bucket_counts_[latent_hint];
            ++total_inserts_;
        } else {
            p = max_priority_;
            ++total_inserts_;
        }
        std::size_t slot = next_slot_;
        entries_[slot] = ReplayEntry{tr, latent_hint, p, total_inserts_ - 1};
        tree_.set(slot, std::pow(p, config_.varsigma));
        max_priority_ = std::max(max_priority_, p);
        next_slot_ = (next_slot_ + 1) % config_.capacity;
        size_ = std::min(size_ + 1, config_.capacity);
    }

    SampledBatch sample(std::size_t batch_size, RngStream& rng) const {
        if (size_ < batch_size) throw std::runtime_error("replay: buffer underfull");
        SampledBatch batch;
        batch.indices.reserve(batch_size);
        batch.entries.reserve(batch_size);
        batch.weights.reserve(batch_size);
        double total = tree_.total();
        double n = static_cast<double>(size_);
        double max_w = 0.0;
        for (std::size_t k = 0; k < batch_size; ++k) {
            std::size_t i = tree_.sample(rng.uniform() * total);
            double prob = tree_.get(i) / total;
            double w = std::pow(n * prob, -config_.omega);
            batch.indices.push_back(i);
            batch.entries.push_back(&entries_[i]);
            batch.weights.push_back(w);
            max_w = std::max(max_w, w);
        }
        for (double& w : batch.weights) w /= max_w;
        return batch;
    }

    // Loss-based priority via the logistic mapping onto (0, x*).
    void update_priority_loss(std::size_t slot, double loss) {
        if (config_.mode != ReplayMode::loss)
            throw std::logic_error("replay: priority updates require loss mode");
        if (slot >= size_) throw std::out_of_range("replay: bad slot");
        loss_max_ = std::max(loss_max_, loss);
        loss_min_ = std::min(loss_min_, loss);
        double p;
        if (loss_max_ - loss_min_ <= 0.0) {
            p = config_.x_star / 2.0;
        } else {
            double x0 = (loss_max_ - loss_min_) / 2.0;
            double k = config_.x_star / (loss_max_ - loss_min_);
            p = config_.x_star / (1.0 + std::exp(-k * (loss - x0)));
        }
        entries_[slot].priority = p;
        tree_.set(slot, std::pow(p, config_.varsigma));
        max_priority_ = std::max(max_priority_, p);
    }

    const ReplayEntry& entry(std::size_t slot) const { return entries_.at(slot); }
    double priority(std::size_t slot) const { return entries_.at(slot).priority; }
    const std::map<LatentState, long long>& bucket_counts() const { return bucket_counts_; }
    std::uint64_t total_inserts() const { return total_inserts_; }

private:
    BufferConfig config_;
    SumTree tree_;
    std::vector<ReplayEntry> entries_;
    std::map<LatentState, long long> bucket_counts_;
    std::uint64_t total_inserts_ = 0;
    std::size_t next_slot_ = 0;
    std::size_t size_ = 0;
    double max_priority_ = 1.0;
    double loss_max_ = -std::numeric_limits<double>::infinity();
    double loss_min_ = std::numeric_limits<double>::infinity();
};

}  // namespace latcert
