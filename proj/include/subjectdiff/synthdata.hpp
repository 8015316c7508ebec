#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "subjectdiff/core/image.hpp"
#include "subjectdiff/core/serialize.hpp"

namespace sdg {

inline constexpr int kNumBodyShapes = 8;
inline constexpr int kNumPatterns = 6;
inline constexpr int kNumEyeStyles = 4;
inline constexpr int kNumPoses = 8;
inline constexpr int kNumBackgrounds = 12;
inline constexpr int kNumColorWords = 12;
inline constexpr int kSpriteCells = 16;

// Procedural parameters that fully determine a subject's identity.
struct IdentitySpec {
    int identity_id = -1;  // -1 for untracked (general-domain) objects
    int body_shape = 0;
    double primary_color = 0.0;  // hue in [0,1)
    int marking_pattern = 0;
    double marking_color = 0.0;  // hue in [0,1)
    double size_ratio = 1.0;     // [0.6, 1.0]
    int eye_style = 0;

    bool operator==(const IdentitySpec&) const = default;
};

struct RenderParams {
    int pose = 0;           // D4 orientation, [0,8)
    int background_id = 0;  // [0,12)
    double scale = 1.0;     // [0.5, 1.0]
    double pos_x = 0.5, pos_y = 0.5;  // normalized object center
    int accessory = 0;      // 0 none, 1 hat, 2 ball

    bool operator==(const RenderParams&) const = default;
};

struct RenderedSample {
    ImageF image;
    MaskImage mask;
    IdentitySpec identity;
    RenderParams render;
};

struct GeneralSample {
    ImageF image;
    std::vector<int> caption;
};

IdentitySpec sample_identity(uint64_t corpus_seed, int identity_id);

ImageF render_background(int background_id, int h, int w);

// Deterministic in all inputs. Throws std::invalid_argument when the object
// or its accessory would leave the canvas. noise_seed is part of the
// contract but the drawing itself is noise-free; corpus-level randomness is
// handled by the per-record parameter streams.
RenderedSample render(const IdentitySpec& identity, const RenderParams& params, uint64_t noise_seed,
                      int canvas = 32);

// Rendered object pixel size for given identity/params; exposed so corpus
// sampling can keep placements on-canvas.
int object_pixel_size(const IdentitySpec& identity, const RenderParams& params);

struct CorpusConfig {
    uint64_t seed = 7;
    int canvas = 32;
    int n_identities = 500;
    int n_train_identities = 450;
    int renders_per_identity = 8;
    int n_general = 20000;
    // Domain renders draw backgrounds from this subset; the general corpus
    // uses all backgrounds. Mirrors the narrower scene statistics of a
    // subject-specific dataset.
    std::vector<int> domain_backgrounds = {0, 1, 2, 3, 4, 5};

    json to_json() const;
    static CorpusConfig from_json(const json& j);
};

enum class Split { kTrain, kHeldout };

struct DomainRecord {
    IdentitySpec identity;
    RenderParams render;
    int render_idx = 0;
    Split split = Split::kTrain;
    ImageF image;
    MaskImage mask;
};

struct Corpus {
    CorpusConfig config;
    std::vector<DomainRecord> domain_train;
    std::vector<DomainRecord> domain_heldout;
    std::vector<GeneralSample> general;
};

// Pure per-record generators; the corpus is their concatenation.
DomainRecord generate_domain_record(const CorpusConfig& config, int identity_id, int render_idx);
GeneralSample generate_general_record(const CorpusConfig& config, int index);

Corpus generate_corpus(const CorpusConfig& config, bool parallel = true);

// On-disk layout: one directory per split, lossless 8-bit ppm images,
// 1-bit pbm masks, line-delimited json metadata.
void write_corpus(const Corpus& corpus, const std::string& dir, bool force = false);
Corpus load_corpus(const std::string& dir);

}  // namespace sdg
