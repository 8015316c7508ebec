#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace sdg {

// Closed caption vocabulary. Token 0 is reserved for padding and never
// produced by the tokenizer.
class Vocab {
public:
    static const Vocab& instance();

    int id(const std::string& word) const;           // throws on unknown word
    const std::string& word(int id) const;           // throws on bad id
    bool contains(const std::string& word) const { return word_to_id_.count(word) != 0; }
    int size() const { return static_cast<int>(words_.size()); }

    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

    static constexpr int kPad = 0;

private:
    Vocab();
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> word_to_id_;
};

}  // namespace sdg
