// SPDX-License-Identifier: Apache-2.0
//
// Synthetic dataset, the few-shot / noisy-label transforms, and the on-disk
// tensor container. Every generator and transform is a pure function of its
// inputs and seed. The container format is fixed and byte-exact:
//
//   magic "DSKD" | version u32 | tensor count u32
//   per tensor: name len u16 | name bytes | rank u8 | extents u64... |
//               payload as little-endian 32-bit floats (raw bits, no
//               conversion arithmetic)

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dskd/rng.hpp"
#include "dskd/tensor.hpp"

namespace dskd {

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// dataset

struct Dataset {
    Tensor images;            // [B, H, W, C] in [0,1]
    std::vector<int> labels;  // class indices < classes
    int classes = 0;
    std::string split = "train";

    int size() const { return images.defined() ? images.dim(0) : 0; }

    void validate() const {
        if (size() != static_cast<int>(labels.size()))
            throw ConfigError("Dataset: image/label count mismatch");
        for (int l : labels)
            if (l < 0 || l >= classes) throw ConfigError("Dataset: label out of range");
    }
};

namespace detail {

// One geometric template per class on a [0,1] canvas: oriented bars through
// the center for all but the last class, a centered disk for the last.
inline std::vector<float> class_template(int cls, int classes, int h, int w) {
    std::vector<float> img(static_cast<size_t>(h) * w, 0.1f);
    double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    double thickness = 0.09 * std::min(h, w);
    if (cls == classes - 1) {
        double r = 0.28 * std::min(h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double d = std::hypot(y - cy, x - cx);
                if (d <= r) img[static_cast<size_t>(y) * w + x] = 0.9f;
            }
    } else {
        double angle = 3.14159265358979323846 * cls / std::max(1, classes - 1);
        double nx = -std::sin(angle), ny = std::cos(angle);  // normal to the bar
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double dist = std::abs((y - cy) * ny + (x - cx) * nx);
                if (dist <= thickness) img[static_cast<size_t>(y) * w + x] = 0.9f;
            }
    }
    return img;
}

}  // namespace detail

// Renders per_class items per class from fixed templates plus Gaussian pixel
// noise, clamped to [0,1]. Items are class-major and deterministic in seed.
inline Dataset gen_blobs(int classes, int per_class, int h, int w, double noise_sd, uint64_t seed,
                         const std::string& split = "train") {
    if (classes < 2) throw ConfigError("gen_blobs: need at least two classes");
    if (per_class < 1) throw ConfigError("gen_blobs: need at least one item per class");
    RngStream rng(seed, stream_tag::dataset);
    int B = classes * per_class;
    std::vector<float> images(static_cast<size_t>(B) * h * w);
    std::vector<int> labels(static_cast<size_t>(B));
    for (int c = 0; c < classes; ++c) {
        auto tmpl = detail::class_template(c, classes, h, w);
        for (int i = 0; i < per_class; ++i) {
            int idx = c * per_class + i;
            labels[static_cast<size_t>(idx)] = c;
            float* dst = images.data() + static_cast<size_t>(idx) * h * w;
            for (int p = 0; p < h * w; ++p) {
                double v = tmpl[static_cast<size_t>(p)] + noise_sd * rng.normal();
                dst[p] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
            }
        }
    }
    Dataset ds;
    ds.images = Tensor::from({B, h, w, 1}, std::move(images));
    ds.labels = std::move(labels);
    ds.classes = classes;
    ds.split = split;
    return ds;
}

// Class-balanced subsample: floor(fraction * per-class count) items per
// class. The selection depends only on (seed, fraction), never on anything
// downstream.
inline Dataset few_shot_split(const Dataset& ds, double fraction, uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ConfigError("few_shot_split: fraction must be in (0, 1]");
    ds.validate();
    if (fraction == 1.0) return ds;

    // bucket indices per class, preserving original order
    std::vector<std::vector<int>> buckets(static_cast<size_t>(ds.classes));
    for (int i = 0; i < ds.size(); ++i) buckets[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);

    std::vector<int> keep;
    for (int c = 0; c < ds.classes; ++c) {
        auto& idx = buckets[static_cast<size_t>(c)];
        RngStream rng(seed, stream_tag::split + (static_cast<uint64_t>(c) << 8));
        // Fisher-Yates, then take the prefix
        for (size_t i = idx.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int>(i)));
            std::swap(idx[i - 1], idx[j]);
        }
        size_t take = static_cast<size_t>(fraction * static_cast<double>(idx.size()));
        for (size_t i = 0; i < take; ++i) keep.push_back(idx[i]);
    }
    std::sort(keep.begin(), keep.end());

    int hw = ds.images.dim(1) * ds.images.dim(2) * ds.images.dim(3);
    std::vector<float> images(keep.size() * static_cast<size_t>(hw));
    std::vector<int> labels(keep.size());
    for (size_t i = 0; i < keep.size(); ++i) {
        std::memcpy(images.data() + i * static_cast<size_t>(hw),
                    ds.images.data().data() + static_cast<size_t>(keep[i]) * hw,
                    sizeof(float) * static_cast<size_t>(hw));
        labels[i] = ds.labels[static_cast<size_t>(keep[i])];
    }
    Dataset out;
    out.images = Tensor::from({static_cast<int>(keep.size()), ds.images.dim(1), ds.images.dim(2),
                               ds.images.dim(3)},
                              std::move(images));
    out.labels = std::move(labels);
    out.classes = ds.classes;
    out.split = ds.split;
    return out;
}

// Relabels exactly round(ratio * B) items; every new label differs from the
// original, drawn uniformly from the other classes.
inline Dataset corrupt_labels(const Dataset& ds, double ratio, uint64_t seed) {
    if (ratio < 0.0 || ratio >= 1.0) throw ConfigError("corrupt_labels: ratio must be in [0, 1)");
    ds.validate();
    Dataset out = ds;
    out.labels = ds.labels;
    if (ratio == 0.0) return out;

    int B = ds.size();
    int n = static_cast<int>(std::llround(ratio * B));
    RngStream rng(seed, stream_tag::label_noise);
    std::vector<int> idx(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) idx[static_cast<size_t>(i)] = i;
    for (size_t i = idx.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int>(i)));
        std::swap(idx[i - 1], idx[j]);
    }
    for (int i = 0; i < n; ++i) {
        int item = idx[static_cast<size_t>(i)];
        int old = out.labels[static_cast<size_t>(item)];
        int offset = 1 + rng.uniform_int(ds.classes - 1);
        out.labels[static_cast<size_t>(item)] = (old + offset) % ds.classes;
    }
    return out;
}

// ---------------------------------------------------------------------------
// tensor container

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    std::string file;

    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint8_t>(buf[pos]) | (static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + 1])) << 8);
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    void need(size_t n) const {
        if (pos + n > buf.size()) throw IoError("container '" + file + "': truncated payload");
    }
};

}  // namespace detail

inline constexpr uint32_t kContainerVersion = 1;

// Ordered named tensors; order round-trips along with the payload bits.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_container(const std::string& path, const NamedTensors& tensors) {
    std::string out;
    out += "DSKD";
    detail::put_u32(out, kContainerVersion);
    detail::put_u32(out, static_cast<uint32_t>(tensors.size()));
    std::map<std::string, int> seen;
    for (const auto& [name, t] : tensors) {
        if (seen.count(name)) throw IoError("container '" + path + "': duplicate tensor '" + name + "'");
        seen[name] = 1;
        if (name.size() > 0xffff) throw IoError("container: tensor name too long");
        detail::put_u16(out, static_cast<uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) detail::put_u64(out, static_cast<uint64_t>(t.dim(i)));
        for (float v : t.data()) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            detail::put_u32(out, bits);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("container '" + path + "': cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("container '" + path + "': write failed");
}

inline NamedTensors read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("container '" + path + "': cannot open");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r{buf, 0, path};

    if (r.bytes(4) != "DSKD") throw IoError("container '" + path + "': bad magic");
    uint32_t version = r.u32();
    if (version != kContainerVersion)
        throw IoError("container '" + path + "': unsupported version " + std::to_string(version));
    uint32_t count = r.u32();

    NamedTensors out;
    std::map<std::string, int> seen;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = r.u16();
        std::string name = r.bytes(name_len);
        if (seen.count(name)) throw IoError("container '" + path + "': duplicate tensor '" + name + "'");
        seen[name] = 1;
        uint8_t rank = r.u8();
        Shape shape(rank);
        int64_t n = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            uint64_t e = r.u64();
            if (e == 0 || e > (1ull << 31))
                throw IoError("container '" + path + "': invalid extent in '" + name + "'");
            shape[d] = static_cast<int>(e);
            n *= static_cast<int64_t>(e);
        }
        std::vector<float> vals(static_cast<size_t>(n));
        for (auto& v : vals) {
            uint32_t bits = r.u32();
            std::memcpy(&v, &bits, 4);
        }
        out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(vals)));
    }
    if (r.pos != buf.size()) throw IoError("container '" + path + "': trailing bytes");
    return out;
}

// dataset files are containers with tensors named "images" and "labels"
inline void write_dataset(const std::string& path, const Dataset& ds) {
    NamedTensors named;
    named.emplace_back("images", ds.images);
    named.emplace_back("labels", Tensor::from({ds.size()}, std::vector<float>(ds.labels.begin(), ds.labels.end())));
    named.emplace_back("classes", Tensor::scalar(static_cast<float>(ds.classes)));
    write_container(path, named);
}

inline Dataset read_dataset(const std::string& path) {
    auto named = read_container(path);
    Dataset ds;
    bool have_images = false, have_labels = false, have_classes = false;
    for (auto& [name, t] : named) {
        if (name == "images") {
            ds.images = t;
            have_images = true;
        } else if (name == "labels") {
            ds.labels.assign(t.data().size(), 0);
            for (size_t i = 0; i < t.data().size(); ++i) ds.labels[i] = static_cast<int>(t.data()[i]);
            have_labels = true;
        } else if (name == "classes") {
            ds.classes = static_cast<int>(t.item());
            have_classes = true;
        }
    }
    if (!have_images || !have_labels || !have_classes)
        throw IoError("dataset '" + path + "': missing images/labels/classes tensors");
    ds.validate();
    return ds;
}

}  // namespace dskd
