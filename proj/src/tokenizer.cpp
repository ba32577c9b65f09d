#include "sklp/tokenizer.hpp"

#include "sklp/errors.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

namespace sklp::model {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  tokens_ = {"[pad]", "[cls]", "[mask]", "[unk]"};
  for (int i = 0; i < kReserved; ++i) index_[tokens_[static_cast<std::size_t>(i)]] = i;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, int vocab_size) {
  if (vocab_size <= kReserved) throw ConfigError("vocab_size must exceed the 4 reserved ids");
  std::map<std::string, std::size_t> counts;
  for (const std::string& t : texts) {
    for (std::string& tok : tokenize(t)) ++counts[std::move(tok)];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, _] : ranked) {
    if (v.size() >= vocab_size) break;
    v.index_[tok] = v.size();
    v.tokens_.push_back(tok);
  }
  return v;
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw VocabularyError("token id " + std::to_string(id) + " not in vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const std::string& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write vocabulary " + path.string());
  for (const std::string& t : tokens_) f << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("vocabulary not found: " + path.string());
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  std::string line;
  while (std::getline(f, line)) {
    v.index_[line] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(line);
  }
  if (v.size() < kReserved || v.tokens_[0] != "[pad]" || v.tokens_[1] != "[cls]" ||
      v.tokens_[2] != "[mask]" || v.tokens_[3] != "[unk]") {
    throw FormatError("vocabulary file lacks the reserved header: " + path.string());
  }
  return v;
}

}  // namespace sklp::model
