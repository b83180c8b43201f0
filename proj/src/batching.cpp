#include "cvqa/batching.hpp"

#include <algorithm>
#include <iostream>
#include <unordered_map>

#include "cvqa/errors.hpp"

namespace cvqa::batching {

RelationIndex build_relations(std::span<const synth::QARecord> records) {
  std::unordered_map<int, const synth::QARecord*> by_id;
  for (const auto& r : records) by_id.emplace(r.qa_id, &r);

  RelationIndex index;
  for (const auto& r : records) {
    if (!r.related_main) continue;
    const auto it = by_id.find(*r.related_main);
    if (it == by_id.end() || it->second->qtype != synth::QType::main) {
      throw IntegrityError("qa_id " + std::to_string(r.qa_id) + ": related_main " +
                           std::to_string(*r.related_main) + " is not a main question in this set");
    }
    if (it->second->scene_id != r.scene_id) {
      throw IntegrityError("qa_id " + std::to_string(r.qa_id) + ": linked to main " +
                           std::to_string(*r.related_main) + " from scene " +
                           std::to_string(it->second->scene_id) + ", not " + std::to_string(r.scene_id));
    }
    index.subs_of_main[*r.related_main].push_back(r.qa_id);
    index.main_of_sub[r.qa_id] = *r.related_main;
  }
  for (auto& [main, subs] : index.subs_of_main) std::sort(subs.begin(), subs.end());
  return index;
}

PairedBatchSampler::PairedBatchSampler(std::span<const synth::QARecord> records, const RelationIndex& relations,
                                       std::size_t batch_size, std::size_t pair_quota, std::uint64_t seed)
    : batch_size_(batch_size), pair_quota_(pair_quota), record_count_(records.size()), rng_(seed) {
  if (records.empty()) throw UsageError("batch sampler: no records");
  if (batch_size == 0) throw UsageError("batch sampler: batch size must be positive");
  if (batch_size < 2 * pair_quota) {
    throw UsageError("batch sampler: batch of " + std::to_string(batch_size) + " cannot hold " +
                     std::to_string(pair_quota) + " pairs");
  }
  std::unordered_map<int, std::size_t> pos;
  for (std::size_t i = 0; i < records.size(); ++i) pos.emplace(records[i].qa_id, i);
  for (const auto& [main, subs] : relations.subs_of_main) {
    const auto m = pos.find(main);
    if (m == pos.end() || subs.empty()) continue;
    std::vector<std::size_t> sub_pos;
    for (int s : subs) {
      if (const auto it = pos.find(s); it != pos.end()) sub_pos.push_back(it->second);
    }
    if (sub_pos.empty()) continue;
    mains_.push_back(m->second);
    subs_.push_back(std::move(sub_pos));
  }
  if (pair_quota_ > mains_.size()) {
    std::cerr << "warning: pair quota " << pair_quota_ << " exceeds the " << mains_.size()
              << " main questions with sub-questions; clamped\n";
    pair_quota_ = mains_.size();
  }
  filler_order_.resize(record_count_);
  placed_.resize(record_count_);
}

void PairedBatchSampler::start_epoch() {
  main_order_.resize(mains_.size());
  for (std::size_t i = 0; i < main_order_.size(); ++i) main_order_[i] = i;
  std::shuffle(main_order_.begin(), main_order_.end(), rng_);
  main_cursor_ = 0;
  mains_done_ = pair_quota_ == 0 || mains_.empty();
  for (std::size_t i = 0; i < record_count_; ++i) filler_order_[i] = i;
  std::shuffle(filler_order_.begin(), filler_order_.end(), rng_);
  filler_cursor_ = 0;
  std::fill(placed_.begin(), placed_.end(), 0);
  epoch_finished_ = false;
}

Batch PairedBatchSampler::next() {
  if (epoch_finished_) start_epoch();
  Batch b;
  b.sample_ids.reserve(batch_size_);
  const auto place = [&](std::size_t record) {
    placed_[record] = 1;
    b.sample_ids.push_back(record);
    return b.sample_ids.size() - 1;
  };

  for (std::size_t k = 0; k < pair_quota_; ++k) {
    if (main_cursor_ == main_order_.size()) {
      std::shuffle(main_order_.begin(), main_order_.end(), rng_);
      main_cursor_ = 0;
    }
    const std::size_t m = main_order_[main_cursor_++];
    if (main_cursor_ == main_order_.size()) mains_done_ = true;
    const auto& subs = subs_[m];
    const std::size_t s = subs[std::uniform_int_distribution<std::size_t>(0, subs.size() - 1)(rng_)];
    const std::size_t sub_pos = place(s);
    const std::size_t main_pos = place(mains_[m]);
    b.pair_positions.push_back({sub_pos, main_pos});
  }

  while (b.sample_ids.size() < batch_size_ && filler_cursor_ < record_count_) {
    const std::size_t r = filler_order_[filler_cursor_++];
    if (!placed_[r]) place(r);
  }
  std::uniform_int_distribution<std::size_t> any(0, record_count_ - 1);
  while (b.sample_ids.size() < batch_size_) place(any(rng_));

  const bool no_filler_slots = batch_size_ == 2 * pair_quota_;
  if ((filler_cursor_ == record_count_ || no_filler_slots) && mains_done_) {
    epoch_finished_ = true;
    ++epochs_completed_;
  }
  return b;
}

Batch next_batch(std::span<const synth::QARecord> records, const RelationIndex& relations, std::size_t batch_size,
                 std::size_t pair_quota, std::uint64_t seed) {
  PairedBatchSampler sampler(records, relations, batch_size, pair_quota, seed);
  return sampler.next();
}

}  // namespace cvqa::batching
