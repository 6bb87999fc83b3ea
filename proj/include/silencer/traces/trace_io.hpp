#pragma once

// Versioned binary trace container. All integers little-endian.
//
//   header:
//     char[8]  magic "MOETRACE"
//     u16      version (currently 1)
//     u16      reserved, 0
//     u32      L, N, K, vocab_size
//     str      model_id                  (str = u32 byte length + UTF-8 bytes)
//     u32      metadata entry count, then (str key, str value) per entry
//     u64      trace count
//   record, repeated:
//     u32      prompt_id
//     u32      pair_id
//     u8       label (0 benign, 1 malicious)
//     u8       flags (bit 0: gate probabilities present)
//     u32      T
//     u32[T]   token ids
//     u16[T*L*K] selected expert indices, order (t, l, k)
//     f32[T*L*K] gate probabilities, only when flag bit 0 is set

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "silencer/error.hpp"
#include "silencer/traces/trace.hpp"

namespace silencer::traces {

inline constexpr std::array<char, 8> kTraceMagic{'M', 'O', 'E', 'T', 'R', 'A', 'C', 'E'};
inline constexpr std::uint16_t kTraceFormatVersion = 1;

namespace detail {

class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        static_assert(std::is_integral_v<T>);
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            bytes_.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
        }
    }
    void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
    void put_str(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    void put_raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
    const std::vector<char>& bytes() const { return bytes_; }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    float get_f32(const char* what) { return std::bit_cast<float>(get<std::uint32_t>(what)); }
    std::string get_str(const char* what) {
        const auto n = get<std::uint32_t>(what);
        need(n, what);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(std::string("truncated trace file while reading ") + what, pos_);
        }
    }
    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const char* cursor() const { return bytes_.data() + pos_; }
    void skip(std::size_t n) { pos_ += n; }

private:
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<char> encode_corpus(const TraceCorpus& corpus) {
    corpus.validate();
    const CorpusHeader& h = corpus.header;
    detail::ByteWriter w;
    w.put_raw(kTraceMagic.data(), kTraceMagic.size());
    w.put(kTraceFormatVersion);
    w.put(std::uint16_t{0});
    w.put(static_cast<std::uint32_t>(h.num_layers));
    w.put(static_cast<std::uint32_t>(h.num_experts));
    w.put(static_cast<std::uint32_t>(h.top_k));
    w.put(static_cast<std::uint32_t>(h.vocab_size));
    w.put_str(h.model_id);
    w.put(static_cast<std::uint32_t>(h.metadata.size()));
    for (const auto& [k, v] : h.metadata) {
        w.put_str(k);
        w.put_str(v);
    }
    w.put(static_cast<std::uint64_t>(corpus.traces.size()));
    for (const RoutingTrace& tr : corpus.traces) {
        w.put(tr.prompt_id);
        w.put(tr.pair_id);
        w.put(static_cast<std::uint8_t>(tr.label));
        w.put(static_cast<std::uint8_t>(tr.has_gates() ? 1 : 0));
        w.put(static_cast<std::uint32_t>(tr.tokens.size()));
        for (TokenId t : tr.tokens) {
            w.put(static_cast<std::uint32_t>(t));
        }
        for (std::uint16_t s : tr.selections) {
            w.put(s);
        }
        for (double g : tr.gates) {
            w.put_f32(static_cast<float>(g));
        }
    }
    return w.bytes();
}

struct ExpectedDims {
    std::size_t num_layers = 0;
    std::size_t num_experts = 0;
    std::size_t top_k = 0;
};

/// Parse a trace container. When `expected` is given, the header's (L, N, K) must
/// match it or a DimensionError is raised before any record is read.
inline TraceCorpus decode_corpus(std::vector<char> bytes, std::optional<ExpectedDims> expected = std::nullopt) {
    detail::ByteReader r(std::move(bytes));
    r.need(kTraceMagic.size(), "magic");
    if (std::memcmp(r.cursor(), kTraceMagic.data(), kTraceMagic.size()) != 0) {
        throw FormatError("not a trace file (bad magic)", 0);
    }
    r.skip(kTraceMagic.size());
    const std::size_t version_at = r.offset();
    const auto version = r.get<std::uint16_t>("version");
    if (version != kTraceFormatVersion) {
        throw FormatError("unsupported trace format version " + std::to_string(version) + " (expected " +
                              std::to_string(kTraceFormatVersion) + ")",
                          version_at);
    }
    r.get<std::uint16_t>("reserved");
    TraceCorpus corpus;
    CorpusHeader& h = corpus.header;
    h.num_layers = r.get<std::uint32_t>("L");
    h.num_experts = r.get<std::uint32_t>("N");
    h.top_k = r.get<std::uint32_t>("K");
    h.vocab_size = r.get<std::uint32_t>("vocab_size");
    if (h.num_layers == 0 || h.num_experts == 0 || h.top_k == 0 || h.top_k > h.num_experts || h.vocab_size == 0) {
        throw FormatError("inconsistent header dimensions", r.offset());
    }
    if (expected) {
        corpus.require_dims(expected->num_layers, expected->num_experts, expected->top_k, "trace file");
    }
    h.model_id = r.get_str("model_id");
    const auto meta = r.get<std::uint32_t>("metadata count");
    for (std::uint32_t i = 0; i < meta; ++i) {
        std::string key = r.get_str("metadata key");
        h.metadata[key] = r.get_str("metadata value");
    }
    const auto count = r.get<std::uint64_t>("trace count");
    const std::size_t lk = h.num_layers * h.top_k;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::size_t record_at = r.offset();
        RoutingTrace tr;
        tr.prompt_id = r.get<std::uint32_t>("prompt_id");
        tr.pair_id = r.get<std::uint32_t>("pair_id");
        const auto label = r.get<std::uint8_t>("label");
        if (label > 1) {
            throw FormatError("invalid label " + std::to_string(label), r.offset() - 1);
        }
        tr.label = static_cast<Label>(label);
        const auto flags = r.get<std::uint8_t>("flags");
        const auto T = r.get<std::uint32_t>("token count");
        tr.num_layers = h.num_layers;
        tr.top_k = h.top_k;
        r.need(static_cast<std::size_t>(T) * (4 + 2 * lk + ((flags & 1) ? 4 * lk : 0)), "trace record body");
        tr.tokens.resize(T);
        for (auto& t : tr.tokens) {
            t = r.get<std::uint32_t>("token");
        }
        tr.selections.resize(T * lk);
        for (auto& s : tr.selections) {
            s = r.get<std::uint16_t>("selection");
        }
        if (flags & 1) {
            tr.gates.resize(T * lk);
            for (auto& g : tr.gates) {
                g = static_cast<double>(r.get_f32("gate"));
            }
        }
        try {
            tr.validate(h.num_layers, h.num_experts, h.top_k, h.vocab_size);
        } catch (const DimensionError& e) {
            throw DimensionError(std::string(e.what()) + " (record starting at byte " + std::to_string(record_at) +
                                 ")");
        }
        corpus.traces.push_back(std::move(tr));
    }
    if (r.remaining() != 0) {
        throw FormatError("trailing bytes after last trace record", r.offset());
    }
    return corpus;
}

inline void write_corpus(const std::string& path, const TraceCorpus& corpus) {
    const std::vector<char> bytes = encode_corpus(corpus);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot open " + path + " for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("failed writing " + path);
    }
}

inline TraceCorpus read_corpus(const std::string& path, std::optional<ExpectedDims> expected = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open trace file " + path);
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_corpus(std::move(bytes), expected);
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.message(), e.offset());
    }
}

} // namespace silencer::traces
