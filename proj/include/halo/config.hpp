#pragma once

// Flat key-value run configs, a content hash for manifests, and the manifest
// record the CLI writes next to its artifacts.
//
// Config text, version 1:
//
//   config_version = 1
//   train.steps = 300     # one dotted key per line
//   # full-line comment
//
// Blank lines and lines whose first non-space character is '#' are skipped.
// Values are everything after the first '=', trimmed, so paths need no
// quoting. Keys may not repeat. There is no inline-comment syntax; a '#'
// after the '=' belongs to the value.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace halo {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kConfigVersion = 1;

class Config {
  public:
    static Config parse(const std::string& text, const std::string& origin = "<string>") {
        Config cfg;
        cfg.text_ = text;
        cfg.origin_ = origin;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r')
                line.pop_back();
            const std::string stripped = trim(line);
            if (stripped.empty() || stripped.front() == '#')
                continue;
            const std::size_t eq = stripped.find('=');
            if (eq == std::string::npos)
                cfg.fail(lineno, "expected 'key = value'");
            const std::string key = trim(stripped.substr(0, eq));
            const std::string value = trim(stripped.substr(eq + 1));
            if (key.empty())
                cfg.fail(lineno, "empty key");
            for (char c : key)
                if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.')
                    cfg.fail(lineno, "key '" + key + "' has characters outside [A-Za-z0-9_.]");
            if (value.empty())
                cfg.fail(lineno, "key '" + key + "' has no value");
            const auto [it, inserted] = cfg.entries_.emplace(key, Entry{value, lineno, false});
            if (!inserted)
                cfg.fail(lineno, "key '" + key + "' already set on line " +
                                     std::to_string(it->second.line));
        }
        return cfg;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is)
            throw config_error("cannot open config file " + path);
        std::ostringstream buf;
        buf << is.rdbuf();
        return parse(buf.str(), path);
    }

    const std::string& origin() const { return origin_; }
    const std::string& text() const { return text_; }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    std::string get_string(const std::string& key) const { return entry(key).value; }
    std::string get_string(const std::string& key, const std::string& fallback) const {
        return has(key) ? get_string(key) : fallback;
    }

    std::int64_t get_int(const std::string& key) const {
        const Entry& e = entry(key);
        std::size_t pos = 0;
        std::int64_t v = 0;
        try {
            v = std::stoll(e.value, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != e.value.size())
            fail(e.line, "key '" + key + "': '" + e.value + "' is not an integer");
        return v;
    }
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
        return has(key) ? get_int(key) : fallback;
    }

    std::uint64_t get_u64(const std::string& key) const {
        const Entry& e = entry(key);
        std::size_t pos = 0;
        std::uint64_t v = 0;
        try {
            v = std::stoull(e.value, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != e.value.size() || e.value.front() == '-')
            fail(e.line, "key '" + key + "': '" + e.value + "' is not a non-negative integer");
        return v;
    }
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        return has(key) ? get_u64(key) : fallback;
    }

    double get_double(const std::string& key) const {
        const Entry& e = entry(key);
        std::size_t pos = 0;
        double v = 0;
        try {
            v = std::stod(e.value, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != e.value.size())
            fail(e.line, "key '" + key + "': '" + e.value + "' is not a number");
        return v;
    }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }

    bool get_bool(const std::string& key) const {
        const Entry& e = entry(key);
        if (e.value == "true" || e.value == "1")
            return true;
        if (e.value == "false" || e.value == "0")
            return false;
        fail(e.line, "key '" + key + "': expected true/false, got '" + e.value + "'");
        return false;
    }
    bool get_bool(const std::string& key, bool fallback) const {
        return has(key) ? get_bool(key) : fallback;
    }

    // "3" -> {3};  "1,2,7" -> {1,2,7};  "1..10" -> {1,...,10} inclusive.
    std::vector<std::uint64_t> get_seed_list(const std::string& key) const {
        const Entry& e = entry(key);
        std::vector<std::uint64_t> out;
        const std::size_t dots = e.value.find("..");
        if (dots != std::string::npos) {
            const std::uint64_t lo = parse_seed(key, e, trim(e.value.substr(0, dots)));
            const std::uint64_t hi = parse_seed(key, e, trim(e.value.substr(dots + 2)));
            if (hi < lo || hi - lo >= 100000)
                fail(e.line, "key '" + key + "': bad seed range '" + e.value + "'");
            for (std::uint64_t s = lo; s <= hi; ++s)
                out.push_back(s);
            return out;
        }
        std::size_t pos = 0;
        while (pos <= e.value.size()) {
            const std::size_t comma = e.value.find(',', pos);
            const std::string part =
                trim(e.value.substr(pos, comma == std::string::npos ? std::string::npos
                                                                    : comma - pos));
            out.push_back(parse_seed(key, e, part));
            if (comma == std::string::npos)
                break;
            pos = comma + 1;
        }
        return out;
    }

    // Required versioning: refuse configs written for another schema.
    void expect_version() const {
        if (!has("config_version"))
            throw config_error(origin_ + ": missing required key 'config_version'");
        const std::int64_t v = get_int("config_version");
        if (v != kConfigVersion)
            fail(entry("config_version").line,
                 "config_version " + std::to_string(v) + " not supported (this build reads " +
                     std::to_string(kConfigVersion) + ")");
    }

    // Typo guard: every key must have been consumed by some getter.
    void reject_unused() const {
        std::string bad;
        for (const auto& [key, e] : entries_)
            if (!e.used)
                bad += (bad.empty() ? "" : ", ") + ("'" + key + "' (line " +
                                                    std::to_string(e.line) + ")");
        if (!bad.empty())
            throw config_error(origin_ + ": unknown key(s): " + bad);
    }

    std::map<std::string, std::string> echo() const {
        std::map<std::string, std::string> out;
        for (const auto& [key, e] : entries_)
            out.emplace(key, e.value);
        return out;
    }

  private:
    struct Entry {
        std::string value;
        int line = 0;
        mutable bool used = false;
    };

    static std::string trim(const std::string& s) {
        std::size_t b = 0;
        std::size_t e = s.size();
        while (b < e && std::isspace(static_cast<unsigned char>(s[b])))
            ++b;
        while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1])))
            --e;
        return s.substr(b, e - b);
    }

    [[noreturn]] void fail(int line, const std::string& msg) const {
        throw config_error(origin_ + ":" + std::to_string(line) + ": " + msg);
    }

    const Entry& entry(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end())
            throw config_error(origin_ + ": missing required key '" + key + "'");
        it->second.used = true;
        return it->second;
    }

    std::uint64_t parse_seed(const std::string& key, const Entry& e,
                             const std::string& part) const {
        std::size_t pos = 0;
        std::uint64_t v = 0;
        try {
            v = std::stoull(part, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (part.empty() || pos != part.size())
            fail(e.line, "key '" + key + "': '" + part + "' is not a seed");
        return v;
    }

    std::map<std::string, Entry> entries_;
    std::string origin_;
    std::string text_;
};

// ---------------------------------------------------------------------------
// SHA-256 (FIPS 180-4), used for manifest content hashes. Vector-checked in
// the test suite against the published "" and "abc" digests.

namespace detail {

class Sha256 {
  public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        total_ += n;
        while (n > 0) {
            const std::size_t take = std::min(n, std::size_t(64) - fill_);
            std::memcpy(buf_ + fill_, p, take);
            fill_ += take;
            p += take;
            n -= take;
            if (fill_ == 64) {
                block(buf_);
                fill_ = 0;
            }
        }
    }

    std::array<unsigned char, 32> digest() {
        const std::uint64_t bits = total_ * 8;
        const unsigned char pad = 0x80;
        const unsigned char zero = 0;
        update(&pad, 1);
        while (fill_ != 56)
            update(&zero, 1);
        unsigned char len[8];
        for (int i = 0; i < 8; ++i)
            len[i] = static_cast<unsigned char>(bits >> (56 - 8 * i));
        update(len, 8);
        std::array<unsigned char, 32> out{};
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 4; ++j)
                out[static_cast<std::size_t>(4 * i + j)] =
                    static_cast<unsigned char>(h_[static_cast<std::size_t>(i)] >> (24 - 8 * j));
        return out;
    }

  private:
    static std::uint32_t rotr(std::uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

    void block(const unsigned char* p) {
        static constexpr std::uint32_t k[64] = {
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
            0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
            0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
            0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
            0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
            0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
            0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
            0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
            0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
            0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
            0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};
        std::uint32_t w[64];
        for (int i = 0; i < 16; ++i)
            w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
                   (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
        for (int i = 16; i < 64; ++i) {
            const std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            const std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3];
        std::uint32_t e = h_[4], f = h_[5], g = h_[6], h = h_[7];
        for (int i = 0; i < 64; ++i) {
            const std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            const std::uint32_t ch = (e & f) ^ (~e & g);
            const std::uint32_t t1 = h + s1 + ch + k[i] + w[i];
            const std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            const std::uint32_t t2 = s0 + maj;
            h = g;
            g = f;
            f = e;
            e = d + t1;
            d = c;
            c = b;
            b = a;
            a = t1 + t2;
        }
        h_[0] += a;
        h_[1] += b;
        h_[2] += c;
        h_[3] += d;
        h_[4] += e;
        h_[5] += f;
        h_[6] += g;
        h_[7] += h;
    }

    std::array<std::uint32_t, 8> h_ = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                                       0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
    std::uint64_t total_ = 0;
    unsigned char buf_[64] = {};
    std::size_t fill_ = 0;
};

inline std::string hex32(const std::array<unsigned char, 32>& d) {
    static const char* digits = "0123456789abcdef";
    std::string out(64, '0');
    for (std::size_t i = 0; i < 32; ++i) {
        out[2 * i] = digits[d[i] >> 4];
        out[2 * i + 1] = digits[d[i] & 0xf];
    }
    return out;
}

} // namespace detail

inline std::string sha256_hex(const std::string& bytes) {
    detail::Sha256 s;
    s.update(bytes.data(), bytes.size());
    return detail::hex32(s.digest());
}

// Git-style blob hash: digest of "blob <size>\0" + bytes, with SHA-256 as the
// digest. Two files hash equal exactly when their bytes are equal.
inline std::string content_hash(const std::string& bytes) {
    detail::Sha256 s;
    const std::string header = "blob " + std::to_string(bytes.size());
    s.update(header.data(), header.size() + 1); // trailing '\0' of the literal
    s.update(bytes.data(), bytes.size());
    return detail::hex32(s.digest());
}

inline std::string file_content_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw config_error("cannot open " + path + " for hashing");
    std::ostringstream buf;
    buf << is.rdbuf();
    return content_hash(buf.str());
}

// ---------------------------------------------------------------------------
// run manifest

struct ManifestFile {
    std::string path; // relative to the manifest's directory where possible
    std::string hash; // content_hash of the bytes
};

// Everything needed to reproduce a run: the full config echo plus hashes of
// what went in and what came out. Deliberately no timestamps or host info, so
// rerunning a config yields a byte-identical manifest.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::vector<ManifestFile> inputs;
    std::vector<std::uint64_t> seeds;
    std::vector<ManifestFile> outputs;
    std::vector<std::pair<std::string, std::string>> verdicts;
};

} // namespace halo
