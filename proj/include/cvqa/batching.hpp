#pragma once

// The sub -> main relation over QA records and a mini-batch sampler that
// places a fixed number of same-scene (sub, main) pairs in every batch.

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "cvqa/losses.hpp"
#include "cvqa/synthdata.hpp"

namespace cvqa::batching {

struct RelationIndex {
  std::map<int, std::vector<int>> subs_of_main;  // main qa_id -> sub qa_ids, ascending
  std::map<int, int> main_of_sub;

  bool empty() const { return subs_of_main.empty(); }
};

// Throws IntegrityError when a link crosses scenes or does not point at a
// main question in `records`.
RelationIndex build_relations(std::span<const synth::QARecord> records);

struct Batch {
  std::vector<std::size_t> sample_ids;            // positions into the record list
  std::vector<loss::PairIndex> pair_positions;  // positions into sample_ids
};

// Batch layout: pairs first as (sub, main) slot pairs, then filler drawn
// without replacement from a per-epoch shuffle of all records, skipping
// records already placed this epoch. Mains are visited round-robin in a
// per-epoch shuffled order, each time with one of their subs chosen
// uniformly. An epoch ends once every record has been placed and every
// pairable main has been paired; if the filler stream runs dry first, the
// remaining filler slots are drawn uniformly with replacement.
class PairedBatchSampler {
 public:
  // Throws UsageError when batch_size < 2 * pair_quota or records is empty.
  // A quota above the number of pairable mains is clamped with a warning.
  PairedBatchSampler(std::span<const synth::QARecord> records, const RelationIndex& relations,
                     std::size_t batch_size, std::size_t pair_quota, std::uint64_t seed);

  Batch next();

  // True when the most recent batch completed an epoch.
  bool epoch_finished() const { return epoch_finished_; }
  std::size_t epochs_completed() const { return epochs_completed_; }
  std::size_t pair_quota() const { return pair_quota_; }
  std::size_t batch_size() const { return batch_size_; }

 private:
  void start_epoch();

  std::size_t batch_size_;
  std::size_t pair_quota_;
  std::size_t record_count_;
  std::vector<std::size_t> mains_;                // record positions of pairable mains
  std::vector<std::vector<std::size_t>> subs_;  // parallel to mains_
  std::mt19937_64 rng_;

  std::vector<std::size_t> main_order_;
  std::size_t main_cursor_ = 0;
  bool mains_done_ = false;
  std::vector<std::size_t> filler_order_;
  std::size_t filler_cursor_ = 0;
  std::vector<std::uint8_t> placed_;
  bool epoch_finished_ = true;
  std::size_t epochs_completed_ = 0;
};

// One batch from a fresh sampler.
Batch next_batch(std::span<const synth::QARecord> records, const RelationIndex& relations, std::size_t batch_size,
                 std::size_t pair_quota, std::uint64_t seed);

}  // namespace cvqa::batching
