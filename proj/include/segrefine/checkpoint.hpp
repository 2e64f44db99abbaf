// Versioned binary training checkpoints ("DBCK"): model parameters,
// optimizer moments, RNG state, current weak labels, and run history —
// everything a bitwise-identical resume needs. Little-endian throughout.
//
// Layout:
//   magic "DBCK" | version u16 | config_digest u64 | variant u8 | phase u8 |
//   epoch i64 | rng u64 x4 |
//   tensor_count u32 | { name u16+bytes | ndim u8 | dims u32 x ndim | f32 x n } |
//   opt_step u64 | slot_count u32 | { name u16+bytes | count u32 | m f32 x n | v f32 x n } |
//   weak_count u32 | { id u16+bytes | h u32 | w u32 | u8 x h*w } |
//   history_len u32 | utf8 bytes
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "segrefine/adam.hpp"
#include "segrefine/corpus.hpp"
#include "segrefine/errors.hpp"
#include "segrefine/model.hpp"
#include "segrefine/rng.hpp"

namespace segrefine {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;  // "<group>/<param>" — unique across the net
    std::vector<std::int64_t> dims;
    std::vector<float> data;
};

struct CheckpointData {
    std::uint64_t config_digest = 0;
    std::uint8_t variant = 0;  // 0 transfer, 1 baseline
    std::uint8_t phase = 1;    // 1 pretext, 2 fine-tune, 0 joint
    std::int64_t epoch = 0;    // global epochs completed
    Rng::State rng_state{};
    std::vector<NamedTensor> tensors;
    std::uint64_t opt_step = 0;
    std::vector<Adam<float>::Slot> opt_slots;
    std::vector<std::pair<std::string, LabelMap>> weak_labels;  // id -> current label
    std::string history_json;
};

namespace detail {

inline void put_string(std::vector<unsigned char>& b, const std::string& s) {
    if (s.size() > 0xffff) throw ConfigError("checkpoint: string too long");
    segd::detail::put_u16(b, static_cast<std::uint16_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
}

inline void put_f32s(std::vector<unsigned char>& b, const std::vector<float>& v) {
    for (const float f : v) segd::detail::put_u32(b, std::bit_cast<std::uint32_t>(f));
}

inline std::string get_string(segd::detail::Cursor& cur, const char* what) {
    const std::uint16_t len = cur.u16(what);
    cur.need(len, what);
    std::string s(reinterpret_cast<const char*>(cur.buf.data() + cur.pos), len);
    cur.pos += len;
    return s;
}

inline std::vector<float> get_f32s(segd::detail::Cursor& cur, std::size_t count,
                                   const char* what) {
    std::vector<float> v(count);
    for (std::size_t i = 0; i < count; ++i) {
        v[i] = std::bit_cast<float>(cur.u32(what));
    }
    return v;
}

}  // namespace detail

/// Snapshot of every parameter, qualified "<group>/<name>".
inline std::vector<NamedTensor> snapshot_parameters(const DualBranchNet<float>& net) {
    std::vector<NamedTensor> out;
    for (const auto* g : {&net.encoder(), &net.decoder_strong(), &net.decoder_weak()}) {
        for (const auto& p : g->params) {
            out.push_back({g->id + "/" + p.name, p.value.shape(), p.value.data()});
        }
    }
    return out;
}

/// Checks a tensor table against the net without touching it: every name and
/// shape must line up positionally.
inline void verify_parameters(DualBranchNet<float>& net,
                              const std::vector<NamedTensor>& tensors) {
    std::size_t idx = 0;
    for (auto* g : net.groups()) {
        for (auto& p : g->params) {
            if (idx >= tensors.size()) {
                throw ShapeError("checkpoint: tensor table ends early at '" + g->id + "/" +
                                 p.name + "'");
            }
            const NamedTensor& t = tensors[idx++];
            if (t.name != g->id + "/" + p.name) {
                throw ShapeError("checkpoint: tensor '" + t.name + "' where '" + g->id + "/" +
                                 p.name + "' was expected");
            }
            if (t.dims != p.value.shape()) {
                throw ShapeError("checkpoint: tensor '" + t.name + "' has shape " +
                                 shape_str(t.dims) + ", model wants " +
                                 shape_str(p.value.shape()));
            }
        }
    }
    if (idx != tensors.size()) {
        throw ShapeError("checkpoint: tensor table has " + std::to_string(tensors.size()) +
                         " entries, model wants " + std::to_string(idx));
    }
}

/// Writes every parameter back. Verification runs in full before any value
/// moves, so a mismatched checkpoint cannot leave a partial load.
inline void restore_parameters(DualBranchNet<float>& net,
                               const std::vector<NamedTensor>& tensors) {
    verify_parameters(net, tensors);
    std::size_t idx = 0;
    for (auto* g : net.groups()) {
        for (auto& p : g->params) p.value.mutable_data() = tensors[idx++].data;
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& ck) {
    std::vector<unsigned char> buf;
    buf.insert(buf.end(), {'D', 'B', 'C', 'K'});
    segd::detail::put_u16(buf, kCheckpointVersion);
    segd::detail::put_u64(buf, ck.config_digest);
    buf.push_back(ck.variant);
    buf.push_back(ck.phase);
    segd::detail::put_u64(buf, static_cast<std::uint64_t>(ck.epoch));
    for (const std::uint64_t s : ck.rng_state) segd::detail::put_u64(buf, s);

    segd::detail::put_u32(buf, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& t : ck.tensors) {
        detail::put_string(buf, t.name);
        buf.push_back(static_cast<unsigned char>(t.dims.size()));
        for (const auto d : t.dims) {
            segd::detail::put_u32(buf, static_cast<std::uint32_t>(d));
        }
        detail::put_f32s(buf, t.data);
    }

    segd::detail::put_u64(buf, ck.opt_step);
    segd::detail::put_u32(buf, static_cast<std::uint32_t>(ck.opt_slots.size()));
    for (const auto& s : ck.opt_slots) {
        detail::put_string(buf, s.name);
        if (s.m.size() != s.v.size()) throw ConfigError("checkpoint: slot m/v size mismatch");
        segd::detail::put_u32(buf, static_cast<std::uint32_t>(s.m.size()));
        detail::put_f32s(buf, s.m);
        detail::put_f32s(buf, s.v);
    }

    segd::detail::put_u32(buf, static_cast<std::uint32_t>(ck.weak_labels.size()));
    for (const auto& [id, map] : ck.weak_labels) {
        detail::put_string(buf, id);
        segd::detail::put_u32(buf, static_cast<std::uint32_t>(map.h));
        segd::detail::put_u32(buf, static_cast<std::uint32_t>(map.w));
        buf.insert(buf.end(), map.v.begin(), map.v.end());
    }

    segd::detail::put_u32(buf, static_cast<std::uint32_t>(ck.history_json.size()));
    buf.insert(buf.end(), ck.history_json.begin(), ck.history_json.end());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    segd::detail::Cursor cur{buf};

    cur.need(4, "magic");
    if (std::memcmp(buf.data(), "DBCK", 4) != 0) {
        throw ParseError("DBCK: bad magic in '" + path.string() + "'", 0);
    }
    cur.pos = 4;
    const std::uint16_t version = cur.u16("version");
    if (version != kCheckpointVersion) {
        throw ParseError("DBCK: unsupported version " + std::to_string(version), 4);
    }

    CheckpointData ck;
    ck.config_digest = cur.u64("config digest");
    ck.variant = cur.u8("variant");
    ck.phase = cur.u8("phase");
    ck.epoch = static_cast<std::int64_t>(cur.u64("epoch"));
    for (auto& s : ck.rng_state) s = cur.u64("rng state");

    const std::uint32_t tensor_count = cur.u32("tensor count");
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        NamedTensor t;
        t.name = detail::get_string(cur, "tensor name");
        const std::uint8_t ndim = cur.u8("tensor ndim");
        std::int64_t numel = 1;
        for (int d = 0; d < int(ndim); ++d) {
            t.dims.push_back(static_cast<std::int64_t>(cur.u32("tensor dims")));
            numel *= t.dims.back();
        }
        t.data = detail::get_f32s(cur, static_cast<std::size_t>(numel), "tensor payload");
        ck.tensors.push_back(std::move(t));
    }

    ck.opt_step = cur.u64("optimizer step");
    const std::uint32_t slot_count = cur.u32("optimizer slot count");
    for (std::uint32_t i = 0; i < slot_count; ++i) {
        Adam<float>::Slot s;
        s.name = detail::get_string(cur, "slot name");
        const std::uint32_t count = cur.u32("slot size");
        s.m = detail::get_f32s(cur, count, "slot m");
        s.v = detail::get_f32s(cur, count, "slot v");
        ck.opt_slots.push_back(std::move(s));
    }

    const std::uint32_t weak_count = cur.u32("weak label count");
    for (std::uint32_t i = 0; i < weak_count; ++i) {
        const std::string id = detail::get_string(cur, "weak label id");
        const auto h = static_cast<std::int64_t>(cur.u32("weak label h"));
        const auto w = static_cast<std::int64_t>(cur.u32("weak label w"));
        cur.need(static_cast<std::uint64_t>(h * w), "weak label payload");
        LabelMap m(h, w);
        std::copy(buf.begin() + static_cast<std::ptrdiff_t>(cur.pos),
                  buf.begin() + static_cast<std::ptrdiff_t>(cur.pos) + h * w, m.v.begin());
        cur.pos += static_cast<std::uint64_t>(h * w);
        ck.weak_labels.emplace_back(id, std::move(m));
    }

    const std::uint32_t hist_len = cur.u32("history length");
    cur.need(hist_len, "history payload");
    ck.history_json.assign(reinterpret_cast<const char*>(buf.data() + cur.pos), hist_len);
    cur.pos += hist_len;

    if (cur.pos != buf.size()) {
        throw ParseError("DBCK: " + std::to_string(buf.size() - cur.pos) + " trailing bytes",
                         cur.pos);
    }
    return ck;
}

}  // namespace segrefine
