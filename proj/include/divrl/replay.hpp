#pragma once

// Shared replay storage. Every ensemble member writes into and reads from the
// same FIFO buffer; transitions remember which member generated them.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "divrl/environments.hpp"
#include "divrl/error.hpp"
#include "divrl/log.hpp"
#include "divrl/rng.hpp"

namespace divrl::replay {

using env::Action;

struct Transition {
  std::vector<double> obs;
  Action action;
  double reward = 0.0;
  std::vector<double> next_obs;
  bool terminal = false;
  bool truncated = false;
  std::uint32_t generator_id = 0;
  std::vector<std::uint8_t> bootstrap_mask;  // one entry per member, 1 = train on it

  bool operator==(const Transition&) const = default;
};

/// A sampled batch. `slots` are buffer positions, `items` point into the
/// buffer and stay valid until the next push.
struct Batch {
  std::vector<std::size_t> slots;
  std::vector<const Transition*> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  const Transition& operator[](std::size_t i) const { return *items[i]; }
};

/// Each of the `members` bits is 1 with probability `keep_prob`.
inline std::vector<std::uint8_t> draw_bootstrap_mask(Rng& rng, std::size_t members, double keep_prob) {
  DIVRL_REQUIRE(keep_prob > 0.0 && keep_prob <= 1.0, ConfigError,
                "mask keep probability must lie in (0, 1]; 0 would starve every member");
  std::vector<std::uint8_t> mask(members, 1);
  if (keep_prob < 1.0) {
    for (auto& b : mask) b = bernoulli(rng, keep_prob) ? 1 : 0;
  }
  return mask;
}

class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t members) : capacity_(capacity), members_(members) {
    DIVRL_REQUIRE(capacity > 0, ConfigError, "replay capacity must be positive");
    DIVRL_REQUIRE(members > 0, ConfigError, "replay buffer needs at least one member");
    storage_.reserve(std::min<std::size_t>(capacity, 1 << 16));
    by_member_.resize(members);
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t members() const { return members_; }
  std::size_t size() const { return storage_.size(); }
  bool empty() const { return storage_.empty(); }
  std::uint64_t total_pushed() const { return pushed_; }
  std::size_t member_count(std::size_t member) const { return by_member_.at(member).size(); }

  /// i-th oldest stored transition.
  const Transition& at(std::size_t i) const {
    DIVRL_REQUIRE(i < size(), ContractViolation, "replay index out of range");
    const std::size_t oldest = storage_.size() < capacity_ ? 0 : cursor_;
    return storage_[(oldest + i) % capacity_];
  }
  const Transition& slot(std::size_t s) const { return storage_.at(s); }

  void push(Transition t) {
    DIVRL_REQUIRE(t.generator_id < members_, ContractViolation,
                  "generator_id " + std::to_string(t.generator_id) + " outside [0, " + std::to_string(members_) + ")");
    DIVRL_REQUIRE(t.bootstrap_mask.size() == members_, ContractViolation, "bootstrap mask length must equal N");
    DIVRL_REQUIRE(t.obs.size() == t.next_obs.size(), ContractViolation, "obs and next_obs dimensions differ");
    if (!storage_.empty()) {
      const Transition& first = storage_.front();
      DIVRL_REQUIRE(t.obs.size() == first.obs.size() && t.action.continuous.size() == first.action.continuous.size(),
                    ContractViolation, "transition dimensions differ from the stored ones");
    }
    if (storage_.size() < capacity_) {
      index_add(storage_.size(), t.generator_id);
      storage_.push_back(std::move(t));
      cursor_ = storage_.size() % capacity_;
    } else {
      index_remove(cursor_, storage_[cursor_].generator_id);
      index_add(cursor_, t.generator_id);
      storage_[cursor_] = std::move(t);
      cursor_ = (cursor_ + 1) % capacity_;
    }
    ++pushed_;
  }

  /// B independent uniform draws with replacement.
  Batch sample_uniform(std::size_t batch_size, Rng& rng) const {
    if (storage_.empty()) throw EmptyBufferError("sample_uniform: replay buffer is empty");
    Batch b;
    b.slots.reserve(batch_size);
    b.items.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t s = uniform_index(rng, storage_.size());
      b.slots.push_back(s);
      b.items.push_back(&storage_[s]);
    }
    return b;
  }

  /// With probability `self_prob` the whole batch comes from `member`'s own
  /// transitions, otherwise from the full buffer. The branch draw is skipped
  /// when the outcome is certain, so self_prob = 0 consumes the generator
  /// exactly like sample_uniform.
  Batch sample_self_biased(std::size_t member, double self_prob, std::size_t batch_size, Rng& rng) const {
    DIVRL_REQUIRE(self_prob >= 0.0 && self_prob <= 1.0, ConfigError, "self_prob must lie in [0, 1]");
    DIVRL_REQUIRE(member < members_, ContractViolation, "member index out of range");
    if (storage_.empty()) throw EmptyBufferError("sample_self_biased: replay buffer is empty");
    bool self_branch = self_prob >= 1.0;
    if (self_prob > 0.0 && self_prob < 1.0) self_branch = bernoulli(rng, self_prob);
    if (!self_branch) return sample_uniform(batch_size, rng);
    const auto& own = by_member_[member];
    if (own.empty()) {
      warn_once("self_biased_fallback/" + std::to_string(member),
                "member " + std::to_string(member) + " has no self-generated data; sampling uniformly");
      return sample_uniform(batch_size, rng);
    }
    Batch b;
    b.slots.reserve(batch_size);
    b.items.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t s = own[uniform_index(rng, own.size())];
      b.slots.push_back(s);
      b.items.push_back(&storage_[s]);
    }
    return b;
  }

  // Raw state access for checkpoints.
  std::size_t cursor() const { return cursor_; }
  const std::vector<Transition>& raw_storage() const { return storage_; }
  const std::vector<std::vector<std::size_t>>& member_slots() const { return by_member_; }
  void restore(std::vector<Transition> storage, std::size_t cursor, std::uint64_t pushed,
               std::vector<std::vector<std::size_t>> member_slots) {
    DIVRL_REQUIRE(storage.size() <= capacity_ && cursor < capacity_, ChecksumError, "replay state is inconsistent");
    DIVRL_REQUIRE(member_slots.size() == members_, ChecksumError, "replay member index has the wrong size");
    storage_ = std::move(storage);
    cursor_ = cursor;
    pushed_ = pushed;
    by_member_ = std::move(member_slots);
    position_.assign(storage_.size(), 0);
    std::size_t indexed = 0;
    for (std::size_t m = 0; m < members_; ++m) {
      for (std::size_t i = 0; i < by_member_[m].size(); ++i) {
        const std::size_t s = by_member_[m][i];
        DIVRL_REQUIRE(s < storage_.size() && storage_[s].generator_id == m, ChecksumError,
                      "replay member index is inconsistent");
        position_[s] = i;
        ++indexed;
      }
    }
    DIVRL_REQUIRE(indexed == storage_.size(), ChecksumError, "replay member index is incomplete");
  }

 private:
  void index_add(std::size_t slot, std::uint32_t member) {
    if (position_.size() <= slot) position_.resize(slot + 1, 0);
    position_[slot] = by_member_[member].size();
    by_member_[member].push_back(slot);
  }

  void index_remove(std::size_t slot, std::uint32_t member) {
    auto& list = by_member_[member];
    const std::size_t pos = position_[slot];
    const std::size_t moved = list.back();
    list[pos] = moved;
    position_[moved] = pos;
    list.pop_back();
  }

  std::size_t capacity_;
  std::size_t members_;
  std::vector<Transition> storage_;
  std::size_t cursor_ = 0;
  std::uint64_t pushed_ = 0;
  std::vector<std::vector<std::size_t>> by_member_;  // slots generated by each member
  std::vector<std::size_t> position_;                // slot -> index inside its member list
};

}  // namespace divrl::replay
