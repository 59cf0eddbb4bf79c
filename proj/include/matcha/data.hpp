#pragma once

#include "matcha/align.hpp"
#include "matcha/rng.hpp"
#include "matcha/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

namespace matcha {

// ---------------------------------------------------------------------------
// character vocabulary (stand-in for a phonetic front end)
// ---------------------------------------------------------------------------

class Vocab {
public:
    static constexpr std::size_t kUnk = 0;

    Vocab() {
        add('\0');  // reserved UNK slot
        add(' ');
        for (char c = 'a'; c <= 'z'; ++c) add(c);
        for (char c : std::string(".,!?'-;:")) add(c);
    }

    std::size_t size() const { return chars_.size(); }

    std::size_t id_of(char c) const {
        char lc = (c >= 'A' && c <= 'Z') ? char(c - 'A' + 'a') : c;
        for (std::size_t i = 1; i < chars_.size(); ++i)
            if (chars_[i] == lc) return i;
        return kUnk;
    }
    char char_of(std::size_t id) const { return id < chars_.size() ? chars_[id] : '?'; }

private:
    void add(char c) { chars_.push_back(c); }
    std::vector<char> chars_;
};

inline std::vector<std::size_t> tokenize(const std::string& text, const Vocab& vocab) {
    if (text.empty()) throw TensorError("tokenize: empty string");
    std::vector<std::size_t> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(vocab.id_of(c));
    return ids;
}

inline std::string detokenize(const std::vector<std::size_t>& ids, const Vocab& vocab) {
    std::string s;
    for (std::size_t id : ids) s.push_back(vocab.char_of(id));
    return s;
}

// ---------------------------------------------------------------------------
// MTF tensor file: "MTF1" | rank u32le | extents u32le... | f32le payload
// ---------------------------------------------------------------------------

class MtfError : public TensorError {
public:
    MtfError(std::string kind, const std::string& detail)
        : TensorError(kind + ": " + detail), kind_(std::move(kind)) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff),
                          (unsigned char)((v >> 24) & 0xff)};
    os.write((const char*)b, 4);
}
inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read((char*)b, 4)) throw MtfError("truncated", "while reading u32");
    return (std::uint32_t)b[0] | ((std::uint32_t)b[1] << 8) | ((std::uint32_t)b[2] << 16) |
           ((std::uint32_t)b[3] << 24);
}
}  // namespace detail

inline void write_tensor_stream(std::ostream& os, const Tensor<float>& t) {
    os.write("MTF1", 4);
    detail::put_u32(os, (std::uint32_t)t.rank());
    for (std::size_t d : t.shape) detail::put_u32(os, (std::uint32_t)d);
    for (float v : t.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_u32(os, bits);
    }
}

inline Tensor<float> read_tensor_stream(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4)) throw MtfError("truncated", "missing header");
    if (std::memcmp(magic, "MTF1", 4) != 0) throw MtfError("bad magic", "not an MTF file");
    std::uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw MtfError("bad rank", std::to_string(rank) + " > 8");
    Shape sh(rank);
    for (auto& d : sh) d = detail::get_u32(is);
    Tensor<float> t(sh);
    for (auto& v : t.data) {
        std::uint32_t bits = detail::get_u32(is);
        std::memcpy(&v, &bits, 4);
    }
    return t;
}

inline void write_tensor_file(const std::string& path, const Tensor<float>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MtfError("io", "cannot open " + path + " for writing");
    write_tensor_stream(os, t);
    if (!os) throw MtfError("io", "write failed on " + path);
}

inline Tensor<float> read_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MtfError("io", "cannot open " + path);
    return read_tensor_stream(is);
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

template <class S>
struct Utterance {
    std::string id;
    std::string text;
    std::vector<std::size_t> tokens;
    Tensor<S> frames;  // [n_mel x T]
    Durations true_durations;  // empty unless synthetic
};

struct ManifestEntry {
    std::string id;
    std::string text;
    std::string frames_path;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw TensorError("manifest: cannot open " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        out.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                       j.at("frames").get<std::string>()});
    }
    return out;
}

template <class S>
std::vector<Utterance<S>> load_corpus(const std::string& manifest_path, const Vocab& vocab) {
    std::vector<Utterance<S>> out;
    std::string dir = manifest_path.substr(0, manifest_path.find_last_of('/') + 1);
    for (const auto& e : read_manifest(manifest_path)) {
        Utterance<S> u;
        u.id = e.id;
        u.text = e.text;
        u.tokens = tokenize(e.text, vocab);
        std::string fp = e.frames_path;
        if (!fp.empty() && fp[0] != '/') fp = dir + fp;
        u.frames = read_tensor_file(fp).template cast<S>();
        out.push_back(std::move(u));
    }
    return out;
}

template <class S>
struct SynthCorpus {
    std::vector<Utterance<S>> utterances;
    Tensor<S> signatures;  // [vocab_size x n_mel], per-token mel signature
    std::size_t n_mel = 0;
};

// Each token id has a fixed random mel signature; an utterance is 2-8 letter
// tokens, each emitted for 2-6 frames with Gaussian noise sigma = 0.05.
template <class S>
SynthCorpus<S> synth_corpus(std::size_t n_utts, std::size_t vocab_size, std::size_t n_mel,
                            std::uint64_t seed, const Vocab& vocab = Vocab()) {
    if (n_utts < 1 || vocab_size < 1 || n_mel < 1)
        throw TensorError("synth_corpus: parameters must be >= 1");
    SynthCorpus<S> c;
    c.n_mel = n_mel;
    Rng root(seed);
    Rng sig_rng = root.split(1);
    Rng utt_rng = root.split(2);
    c.signatures = Tensor<S>({vocab_size, n_mel});
    for (auto& v : c.signatures.data) v = S(sig_rng.normal());
    // draw letter ids only, so text round-trips through the tokenizer
    std::size_t first_letter = vocab.id_of('a');
    std::size_t n_letters = std::min<std::size_t>(26, vocab_size > first_letter
                                                          ? vocab_size - first_letter
                                                          : 1);
    for (std::size_t n = 0; n < n_utts; ++n) {
        Utterance<S> u;
        u.id = "synth" + std::to_string(n);
        std::size_t n_tok = (std::size_t)utt_rng.uniform_int(2, 8);
        std::size_t T = 0;
        std::vector<std::size_t> durs;
        for (std::size_t i = 0; i < n_tok; ++i) {
            // avoid immediate repeats: equal neighboring signatures would make
            // the boundary between them unidentifiable
            std::size_t tok;
            do {
                tok = first_letter + (std::size_t)utt_rng.uniform_int(0, (std::int64_t)n_letters - 1);
            } while (n_letters > 1 && i > 0 && tok == u.tokens.back());
            u.tokens.push_back(tok);
            durs.push_back((std::size_t)utt_rng.uniform_int(2, 6));
            T += durs.back();
        }
        u.text = detokenize(u.tokens, vocab);
        u.true_durations.d = durs;
        u.frames = Tensor<S>({n_mel, T});
        std::size_t j = 0;
        for (std::size_t i = 0; i < n_tok; ++i)
            for (std::size_t k = 0; k < durs[i]; ++k, ++j)
                for (std::size_t m = 0; m < n_mel; ++m)
                    u.frames(m, j) =
                        c.signatures(u.tokens[i], m) + S(0.05 * utt_rng.normal());
        c.utterances.push_back(std::move(u));
    }
    return c;
}

// Write a corpus to disk as manifest + MTF frame files (the `data` module's
// real ingestion path); returns the manifest path.
template <class S>
std::string write_corpus(const std::vector<Utterance<S>>& utts, const std::string& dir) {
    std::string manifest = dir + "/manifest.jsonl";
    std::ofstream os(manifest);
    if (!os) throw TensorError("write_corpus: cannot open " + manifest);
    for (const auto& u : utts) {
        std::string rel = u.id + ".mtf";
        write_tensor_file(dir + "/" + rel, u.frames.template cast<float>());
        nlohmann::json j{{"id", u.id}, {"text", u.text}, {"frames", rel}};
        os << j.dump() << "\n";
    }
    return manifest;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

template <class S>
struct Batch {
    std::vector<std::string> ids;
    std::vector<std::vector<std::size_t>> tokens;  // true lengths
    Tensor<S> token_pad;    // [B x Nmax], padded with 0
    Tensor<S> token_mask;   // [B x Nmax]
    Tensor<S> frames;       // [B x n_mel x Tmax], zero padded
    Tensor<S> frame_mask;   // [B x Tmax]
    std::vector<std::size_t> n_tokens, n_frames;
    std::vector<Durations> true_durations;  // per item; may be empty

    std::size_t size() const { return ids.size(); }
};

template <class S>
std::vector<Batch<S>> make_batches(const std::vector<Utterance<S>>& utts,
                                   std::size_t batch_size, std::uint64_t seed) {
    if (utts.empty()) throw TensorError("make_batches: empty corpus");
    if (batch_size < 1) throw TensorError("make_batches: batch_size must be >= 1");
    std::vector<std::size_t> order(utts.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());

    std::vector<Batch<S>> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::size_t B = std::min(batch_size, order.size() - start);
        Batch<S> b;
        std::size_t Nmax = 0, Tmax = 0, C = utts[order[start]].frames.rows();
        for (std::size_t i = 0; i < B; ++i) {
            const auto& u = utts[order[start + i]];
            Nmax = std::max(Nmax, u.tokens.size());
            Tmax = std::max(Tmax, u.frames.cols());
        }
        b.token_pad = Tensor<S>({B, Nmax});
        b.token_mask = Tensor<S>({B, Nmax});
        b.frames = Tensor<S>({B, C, Tmax});
        b.frame_mask = Tensor<S>({B, Tmax});
        for (std::size_t i = 0; i < B; ++i) {
            const auto& u = utts[order[start + i]];
            b.ids.push_back(u.id);
            b.tokens.push_back(u.tokens);
            b.n_tokens.push_back(u.tokens.size());
            b.n_frames.push_back(u.frames.cols());
            b.true_durations.push_back(u.true_durations);
            for (std::size_t j = 0; j < u.tokens.size(); ++j) {
                b.token_pad(i, j) = S(u.tokens[j]);
                b.token_mask(i, j) = S(1);
            }
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t j = 0; j < u.frames.cols(); ++j)
                    b.frames(i, c, j) = u.frames(c, j);
            for (std::size_t j = 0; j < u.frames.cols(); ++j) b.frame_mask(i, j) = S(1);
        }
        out.push_back(std::move(b));
    }
    return out;
}

// Debug helper: overwrite every padded position with NaN. Losses must stay
// finite afterwards, proving they never read padding.
template <class S>
void poison_padding(Batch<S>& b) {
    S nan = std::numeric_limits<S>::quiet_NaN();
    std::size_t B = b.frames.dim(0), C = b.frames.dim(1), Tmax = b.frames.dim(2);
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < Tmax; ++j)
            if (b.frame_mask(i, j) < S(0.5))
                for (std::size_t c = 0; c < C; ++c) b.frames(i, c, j) = nan;
}

}  // namespace matcha
