#include "subjectdiff/vocab.hpp"

#include <sstream>
#include <stdexcept>

namespace sdg {

namespace {

const char* kWords[] = {
    // glue
    "a", "the", "in", "on", "with", "and", "creature", "body", "eyes",
    // poses
    "standing", "sitting", "lying", "leaning", "crouching", "tumbling", "floating", "stretching",
    // background nouns
    "meadow", "beach", "snowfield", "cave", "desert", "forest", "city", "harbor", "garden", "workshop", "vault",
    "arena",
    // accessories
    "hat", "ball",
    // sizes
    "small", "medium", "large",
    // body shapes
    "round", "boxy", "pointy", "slender", "wide", "ringed", "crossed", "angular",
    // colors
    "red", "orange", "amber", "lime", "green", "teal", "cyan", "azure", "blue", "purple", "magenta", "pink",
    // marking patterns
    "stripes", "spots", "patches", "rings", "checks", "specks",
    // eye styles
    "dot", "oval", "tall", "beady",
};

}  // namespace

Vocab::Vocab() {
    words_.push_back("<pad>");
    for (const char* w : kWords) words_.push_back(w);
    for (size_t i = 0; i < words_.size(); i++) word_to_id_[words_[i]] = static_cast<int>(i);
    if (words_.size() > 128) throw std::logic_error("vocabulary exceeds 128 tokens");
}

const Vocab& Vocab::instance() {
    static Vocab v;
    return v;
}

int Vocab::id(const std::string& word) const {
    auto it = word_to_id_.find(word);
    if (it == word_to_id_.end()) throw std::invalid_argument("out-of-vocabulary token: '" + word + "'");
    return it->second;
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("bad token id: " + std::to_string(id));
    return words_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string w;
    while (is >> w) ids.push_back(id(w));
    return ids;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); i++) {
        if (ids[i] == kPad) continue;
        if (!out.empty()) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

}  // namespace sdg
