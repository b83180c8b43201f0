#pragma once

// On-disk dataset layout:
//   images/{scene_id}.png   8-bit grayscale rendering of each scene
//   scenes.jsonl            one Scene per line
//   qa_{train,val,test}.jsonl  one QARecord per line
//   vocab.json              answers, class weights, question tokens
// Splits have disjoint scene ids.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cvqa/synthdata.hpp"

namespace cvqa::synth {

inline constexpr std::size_t kMaxQuestionLength = 8;

struct GenerateOptions {
  std::filesystem::path out_dir;
  int train_scenes = 600;
  int val_scenes = 150;
  int test_scenes = 200;
  std::uint64_t seed = 0;
  GenConfig gen;
  QAConfig qa;
};

// Splits `total` scenes 12:3:4 into train/val/test (950 -> 600/150/200).
GenerateOptions split_scene_count(int total);

struct GeneratedDataset {
  std::vector<Scene> scenes;
  std::map<std::string, std::vector<QARecord>> splits;  // "train", "val", "test"
  AnswerVocab answers;
  TokenVocab tokens;
};

// Pure function of options (output directory ignored).
GeneratedDataset generate_dataset(const GenerateOptions& options);
void write_dataset(const GeneratedDataset& data, const std::filesystem::path& dir);

struct Split {
  std::string name;
  std::vector<QARecord> records;
  std::unordered_map<int, Scene> scenes;
  std::unordered_map<int, Image> images;
};

struct Vocabulary {
  AnswerVocab answers;
  TokenVocab tokens;
  std::size_t max_question_length = kMaxQuestionLength;
};

Vocabulary load_vocab(const std::filesystem::path& dir);
// Stable digest of the token and answer lists.
std::string vocab_digest(const Vocabulary& vocab);

// Loads one split with its scenes and images. Throws IntegrityError.
Split load_split(const std::filesystem::path& dir, const std::string& split);

// Re-derives every answer from scene geometry and checks record invariants.
// Throws IntegrityError naming the first offending qa_id.
void verify_split(const Split& split);

nlohmann::json to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const QARecord& r);
QARecord record_from_json(const nlohmann::json& j);

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(std::string_view data);

}  // namespace cvqa::synth
