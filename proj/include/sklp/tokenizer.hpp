#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sklp::model {

/// Lower-cases ASCII and splits on whitespace; every punctuation character
/// becomes its own token.
std::vector<std::string> tokenize(std::string_view text);

/// Word-level vocabulary built from a corpus. Ids 0..3 are reserved for
/// pad, cls, mask and unknown; the remaining ids go to the most frequent
/// corpus terms (ties broken lexicographically).
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kMask = 2;
  static constexpr int kUnknown = 3;
  static constexpr int kReserved = 4;

  Vocabulary();
  static Vocabulary build(std::span<const std::string> texts, int vocab_size);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool is_special(int id) const { return id >= 0 && id < kReserved; }

  std::vector<int> encode(std::string_view text) const;
  /// Space-joined surface form of the ids.
  std::string decode(std::span<const int> ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace sklp::model
