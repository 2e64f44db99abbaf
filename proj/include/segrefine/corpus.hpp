// Corpus assembly (strong / weak / validation pools) and the on-disk dataset
// format: a manifest.json plus one SEGD binary file per tensor.
//
// SEGD layout, all integers little-endian:
//   magic "SEGD" | version u16 | dtype u8 (1=f32, 2=u8) | ndim u8 |
//   dims u32 x ndim | raw row-major payload.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "segrefine/errors.hpp"
#include "segrefine/labelmap.hpp"
#include "segrefine/phantom.hpp"
#include "segrefine/rng.hpp"
#include "segrefine/tensor.hpp"
#include "segrefine/threading.hpp"

namespace segrefine {

enum class Provenance { GroundTruth, Strong, WeakInitial, WeakRefined };
enum class Split { StrongTrain, WeakTrain, Validation };

inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::GroundTruth: return "ground-truth";
        case Provenance::Strong: return "strong";
        case Provenance::WeakInitial: return "weak-initial";
        case Provenance::WeakRefined: return "weak-refined";
    }
    return "?";
}

inline Provenance parse_provenance(const std::string& s) {
    if (s == "ground-truth") return Provenance::GroundTruth;
    if (s == "strong") return Provenance::Strong;
    if (s == "weak-initial") return Provenance::WeakInitial;
    if (s == "weak-refined") return Provenance::WeakRefined;
    throw ConfigError("unknown provenance '" + s + "'");
}

inline const char* split_name(Split s) {
    switch (s) {
        case Split::StrongTrain: return "strong-train";
        case Split::WeakTrain: return "weak-train";
        case Split::Validation: return "validation";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "strong-train") return Split::StrongTrain;
    if (s == "weak-train") return Split::WeakTrain;
    if (s == "validation") return Split::Validation;
    throw ConfigError("unknown split '" + s + "'");
}

/// One slice: the image, its current training label, and the hidden ground
/// truth kept for scoring (equal to label for strong/validation samples).
struct Sample {
    std::string id;
    Tensor<float> image;  // [1,H,W]
    LabelMap label;
    LabelMap gt;
    Provenance provenance = Provenance::GroundTruth;
    Split split = Split::Validation;
};

struct Corpus {
    std::int64_t num_classes = kNumClasses;
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::vector<Sample> samples;  // sorted by id

    std::vector<std::size_t> pool(Split s) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            if (samples[i].split == s) idx.push_back(i);
        }
        return idx;
    }
};

/// Generates `count` phantoms with ground-truth labels. Each sample owns a
/// seed derived from (base_seed, id), so generation order cannot matter and
/// the loop parallelizes per sample.
inline std::vector<Sample> generate_samples(std::int64_t count, std::int64_t h, std::int64_t w,
                                            std::uint64_t base_seed) {
    if (count < 1) throw ConfigError("generate_samples: count must be >= 1");
    std::vector<Sample> out(static_cast<std::size_t>(count));
    parallel_for(count, [&](std::int64_t begin, std::int64_t end) {
        for (std::int64_t i = begin; i < end; ++i) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "s%04lld", static_cast<long long>(i));
            auto& s = out[static_cast<std::size_t>(i)];
            s.id = buf;
            PhantomSample ph = generate_phantom(derive_seed(base_seed, s.id), h, w);
            s.image = std::move(ph.image);
            s.gt = std::move(ph.gt);
            s.label = s.gt;
            s.provenance = Provenance::GroundTruth;
        }
    });
    return out;
}

/// Seeded three-way split. Strong-train and validation samples keep ground
/// truth as their label; every remaining sample gets a corrupted weak label
/// (per-sample corruption seed derived from its id), with ground truth
/// retained hidden for evaluation.
inline Corpus split_corpus(std::vector<Sample> samples, std::int64_t n_strong,
                           std::int64_t n_validation, const CorruptionConfig& corruption,
                           std::uint64_t seed) {
    corruption.validate();
    const auto total = static_cast<std::int64_t>(samples.size());
    if (n_strong < 0 || n_validation < 0 || n_strong + n_validation > total) {
        throw ConfigError("split_corpus: cannot take " + std::to_string(n_strong) +
                          " strong + " + std::to_string(n_validation) + " validation from " +
                          std::to_string(total) + " samples");
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(order);

    for (std::int64_t k = 0; k < total; ++k) {
        Sample& s = samples[order[static_cast<std::size_t>(k)]];
        if (k < n_strong) {
            s.split = Split::StrongTrain;
            s.provenance = Provenance::Strong;
            s.label = s.gt;
        } else if (k < n_strong + n_validation) {
            s.split = Split::Validation;
            s.provenance = Provenance::GroundTruth;
            s.label = s.gt;
        } else {
            s.split = Split::WeakTrain;
            s.provenance = Provenance::WeakInitial;
            CorruptionConfig cc = corruption;
            cc.seed = derive_seed(corruption.seed, s.id);
            s.label = corrupt_label(s.gt, cc);
        }
    }

    Corpus corpus;
    corpus.h = samples.empty() ? 0 : samples[0].image.dim(1);
    corpus.w = samples.empty() ? 0 : samples[0].image.dim(2);
    for (const auto& s : samples) {
        if (s.image.dim(1) != corpus.h || s.image.dim(2) != corpus.w) {
            throw ShapeError("split_corpus: sample '" + s.id + "' has mismatched dims");
        }
    }
    corpus.samples = std::move(samples);
    std::sort(corpus.samples.begin(), corpus.samples.end(),
              [](const Sample& a, const Sample& b) { return a.id < b.id; });
    return corpus;
}

// ---------------------------------------------------------------------------
// SEGD binary files
// ---------------------------------------------------------------------------

namespace segd {

inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr std::uint8_t kDtypeU8 = 2;

namespace detail {

inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xff));
    b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

struct Cursor {
    const std::vector<unsigned char>& buf;
    std::uint64_t pos = 0;

    void need(std::uint64_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw ParseError(std::string("SEGD: truncated ") + what, pos);
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return buf[static_cast<std::size_t>(pos++)];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        const std::uint16_t v = static_cast<std::uint16_t>(buf[static_cast<std::size_t>(pos)]) |
                                static_cast<std::uint16_t>(buf[static_cast<std::size_t>(pos + 1)])
                                    << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(buf[static_cast<std::size_t>(pos + i)]) << (8 * i);
        }
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(buf[static_cast<std::size_t>(pos + i)]) << (8 * i);
        }
        pos += 8;
        return v;
    }
};

}  // namespace detail

struct Payload {
    std::uint8_t dtype = 0;
    std::vector<std::int64_t> dims;
    std::vector<unsigned char> bytes;  // raw little-endian payload

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (const auto d : dims) n *= d;
        return n;
    }
};

inline void write_file(const std::filesystem::path& path, std::uint8_t dtype,
                       const std::vector<std::int64_t>& dims,
                       const unsigned char* data, std::size_t size) {
    std::vector<unsigned char> buf;
    buf.reserve(12 + 4 * dims.size() + size);
    buf.insert(buf.end(), {'S', 'E', 'G', 'D'});
    detail::put_u16(buf, kVersion);
    buf.push_back(dtype);
    buf.push_back(static_cast<unsigned char>(dims.size()));
    for (const auto d : dims) {
        if (d < 0 || d > 0xffffffffLL) throw ConfigError("SEGD: dim out of u32 range");
        detail::put_u32(buf, static_cast<std::uint32_t>(d));
    }
    buf.insert(buf.end(), data, data + size);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline Payload read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    detail::Cursor cur{buf};

    cur.need(4, "magic");
    if (std::memcmp(buf.data(), "SEGD", 4) != 0) {
        throw ParseError("SEGD: bad magic in '" + path.string() + "'", 0);
    }
    cur.pos = 4;
    const std::uint16_t version = cur.u16("version");
    if (version != kVersion) {
        throw ParseError("SEGD: unsupported version " + std::to_string(version), 4);
    }
    Payload p;
    const std::uint64_t dtype_off = cur.pos;
    p.dtype = cur.u8("dtype");
    if (p.dtype != kDtypeF32 && p.dtype != kDtypeU8) {
        throw ParseError("SEGD: unknown dtype code " + std::to_string(int(p.dtype)), dtype_off);
    }
    const std::uint8_t ndim = cur.u8("ndim");
    for (int i = 0; i < int(ndim); ++i) {
        p.dims.push_back(static_cast<std::int64_t>(cur.u32("dims")));
    }
    const std::size_t elt = p.dtype == kDtypeF32 ? 4 : 1;
    const auto expect = static_cast<std::uint64_t>(p.numel()) * elt;
    if (buf.size() - cur.pos != expect) {
        throw ParseError("SEGD: payload size " + std::to_string(buf.size() - cur.pos) +
                             " does not match dims (want " + std::to_string(expect) + ")",
                         cur.pos);
    }
    p.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(cur.pos), buf.end());
    return p;
}

inline void write_f32(const std::filesystem::path& path, const std::vector<std::int64_t>& dims,
                      const std::vector<float>& data) {
    std::vector<unsigned char> bytes;
    bytes.reserve(data.size() * 4);
    for (const float f : data) {
        const auto u = std::bit_cast<std::uint32_t>(f);
        for (int i = 0; i < 4; ++i) {
            bytes.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xff));
        }
    }
    write_file(path, kDtypeF32, dims, bytes.data(), bytes.size());
}

inline void write_u8(const std::filesystem::path& path, const std::vector<std::int64_t>& dims,
                     const std::vector<std::uint8_t>& data) {
    write_file(path, kDtypeU8, dims, data.data(), data.size());
}

inline std::vector<float> as_f32(const Payload& p) {
    if (p.dtype != kDtypeF32) throw ParseError("SEGD: expected f32 payload", 6);
    std::vector<float> out(static_cast<std::size_t>(p.numel()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k) {
            u |= static_cast<std::uint32_t>(p.bytes[i * 4 + static_cast<std::size_t>(k)])
                 << (8 * k);
        }
        out[i] = std::bit_cast<float>(u);
    }
    return out;
}

inline std::vector<std::uint8_t> as_u8(const Payload& p) {
    if (p.dtype != kDtypeU8) throw ParseError("SEGD: expected u8 payload", 6);
    return {p.bytes.begin(), p.bytes.end()};
}

}  // namespace segd

// ---------------------------------------------------------------------------
// Dataset directory (manifest.json + SEGD files)
// ---------------------------------------------------------------------------

inline void write_dataset(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["schema_version"] = 1;
    manifest["num_classes"] = corpus.num_classes;
    manifest["height"] = corpus.h;
    manifest["width"] = corpus.w;
    manifest["samples"] = nlohmann::json::array();
    for (const auto& s : corpus.samples) {
        const std::string img_f = s.id + ".image.segd";
        const std::string lab_f = s.id + ".label.segd";
        const std::string gt_f = s.id + ".gt.segd";
        segd::write_f32(dir / img_f, {1, corpus.h, corpus.w}, s.image.data());
        segd::write_u8(dir / lab_f, {corpus.h, corpus.w}, s.label.v);
        segd::write_u8(dir / gt_f, {corpus.h, corpus.w}, s.gt.v);
        manifest["samples"].push_back({{"id", s.id},
                                       {"provenance", provenance_name(s.provenance)},
                                       {"split", split_name(s.split)},
                                       {"image", img_f},
                                       {"label", lab_f},
                                       {"gt", gt_f}});
    }
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
    out << manifest.dump(2) << "\n";
}

inline LabelMap read_label_file(const std::filesystem::path& path, std::int64_t h,
                                std::int64_t w, std::int64_t num_classes) {
    const auto p = segd::read_file(path);
    if (p.dtype != segd::kDtypeU8 || p.dims.size() != 2 || p.dims[0] != h || p.dims[1] != w) {
        throw ParseError("SEGD: '" + path.string() + "' is not a " + std::to_string(h) + "x" +
                             std::to_string(w) + " label map",
                         6);
    }
    LabelMap m(h, w);
    m.v = segd::as_u8(p);
    for (const std::uint8_t v : m.v) {
        if (v >= num_classes) {
            throw ParseError("SEGD: label value " + std::to_string(int(v)) +
                                 " out of range in '" + path.string() + "'",
                             0);
        }
    }
    return m;
}

inline Corpus read_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    if (!in) throw IoError("cannot open '" + (dir / "manifest.json").string() + "'");
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("manifest.json: " + std::string(e.what()),
                         static_cast<std::uint64_t>(e.byte));
    }
    if (!manifest.contains("schema_version") || manifest["schema_version"] != 1) {
        throw ParseError("manifest.json: unsupported schema_version", 0);
    }
    Corpus corpus;
    corpus.num_classes = manifest.at("num_classes");
    corpus.h = manifest.at("height");
    corpus.w = manifest.at("width");

    std::size_t segd_files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".segd") ++segd_files;
    }
    if (segd_files != manifest.at("samples").size() * 3) {
        throw IoError("dataset '" + dir.string() + "' has " + std::to_string(segd_files) +
                      " SEGD files but the manifest lists " +
                      std::to_string(manifest.at("samples").size() * 3));
    }

    for (const auto& js : manifest.at("samples")) {
        Sample s;
        s.id = js.at("id");
        s.provenance = parse_provenance(js.at("provenance"));
        s.split = parse_split(js.at("split"));
        const auto img = segd::read_file(dir / std::string(js.at("image")));
        if (img.dtype != segd::kDtypeF32 || img.dims.size() != 3 || img.dims[0] != 1 ||
            img.dims[1] != corpus.h || img.dims[2] != corpus.w) {
            throw ParseError("SEGD: '" + std::string(js.at("image")) +
                                 "' is not a [1," + std::to_string(corpus.h) + "," +
                                 std::to_string(corpus.w) + "] image",
                             6);
        }
        s.image = Tensor<float>::from_data({1, corpus.h, corpus.w}, segd::as_f32(img));
        s.label = read_label_file(dir / std::string(js.at("label")), corpus.h, corpus.w,
                                  corpus.num_classes);
        s.gt = read_label_file(dir / std::string(js.at("gt")), corpus.h, corpus.w,
                               corpus.num_classes);
        corpus.samples.push_back(std::move(s));
    }
    std::sort(corpus.samples.begin(), corpus.samples.end(),
              [](const Sample& a, const Sample& b) { return a.id < b.id; });
    return corpus;
}

// ---------------------------------------------------------------------------
// Label overlays (refined labels shipped separately from the dataset)
// ---------------------------------------------------------------------------

inline void write_label_overlay(const std::filesystem::path& dir,
                                const std::vector<std::pair<std::string, LabelMap>>& labels,
                                std::int64_t num_classes) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["schema_version"] = 1;
    meta["kind"] = "label-overlay";
    meta["num_classes"] = num_classes;
    meta["labels"] = nlohmann::json::array();
    auto sorted = labels;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [id, map] : sorted) {
        const std::string file = id + ".label.segd";
        segd::write_u8(dir / file, {map.h, map.w}, map.v);
        meta["labels"].push_back({{"id", id}, {"file", file}});
    }
    std::ofstream out(dir / "overlay.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write overlay.json in '" + dir.string() + "'");
    out << meta.dump(2) << "\n";
}

inline std::vector<std::pair<std::string, LabelMap>> read_label_overlay(
    const std::filesystem::path& dir, std::int64_t h, std::int64_t w,
    std::int64_t num_classes) {
    std::ifstream in(dir / "overlay.json", std::ios::binary);
    if (!in) throw IoError("cannot open '" + (dir / "overlay.json").string() + "'");
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("overlay.json: " + std::string(e.what()),
                         static_cast<std::uint64_t>(e.byte));
    }
    if (meta.value("kind", "") != "label-overlay") {
        throw ParseError("overlay.json: not a label overlay", 0);
    }
    std::vector<std::pair<std::string, LabelMap>> out;
    for (const auto& je : meta.at("labels")) {
        const std::string id = je.at("id");
        out.emplace_back(id,
                         read_label_file(dir / std::string(je.at("file")), h, w, num_classes));
    }
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

}  // namespace segrefine
