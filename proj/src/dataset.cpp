#include "oscqat/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace oscqat {

std::pair<Tensor, std::vector<int>> Dataset::batch(const std::vector<std::size_t>& idx) const {
    const std::size_t C = channels(), H = height(), W = width();
    const std::size_t stride = C * H * W;
    Tensor x = Tensor::zeros({idx.size(), C, H, W});
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= size()) throw std::out_of_range("Dataset::batch: index out of range");
        std::copy_n(images.data.begin() + idx[i] * stride, stride, x.data.begin() + i * stride);
        y[i] = labels[idx[i]];
    }
    return {std::move(x), std::move(y)};
}

std::pair<Tensor, std::vector<int>> Dataset::batch_range(std::size_t first,
                                                         std::size_t count) const {
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
    return batch(idx);
}

namespace {

std::uint32_t read_be32(std::ifstream& f, const std::string& path, std::size_t& offset) {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(path + ": truncated at byte offset " + std::to_string(offset));
    offset += 4;
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw std::runtime_error(images_path + ": cannot open");
    std::size_t off = 0;
    const std::uint32_t magic_i = read_be32(fi, images_path, off);
    if (magic_i != 0x00000803)
        throw std::runtime_error(images_path + ": bad magic at byte offset 0 (expected 0x803)");
    const std::uint32_t n = read_be32(fi, images_path, off);
    const std::uint32_t h = read_be32(fi, images_path, off);
    const std::uint32_t w = read_be32(fi, images_path, off);
    std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * h * w);
    if (!fi.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
        throw std::runtime_error(images_path + ": truncated pixel data at byte offset " +
                                 std::to_string(off));

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw std::runtime_error(labels_path + ": cannot open");
    std::size_t loff = 0;
    const std::uint32_t magic_l = read_be32(fl, labels_path, loff);
    if (magic_l != 0x00000801)
        throw std::runtime_error(labels_path + ": bad magic at byte offset 0 (expected 0x801)");
    const std::uint32_t nl = read_be32(fl, labels_path, loff);
    if (nl != n)
        throw std::runtime_error("IDX count mismatch: " + std::to_string(n) + " images vs " +
                                 std::to_string(nl) + " labels");
    std::vector<unsigned char> raw(nl);
    if (!fl.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw std::runtime_error(labels_path + ": truncated label data at byte offset " +
                                 std::to_string(loff));

    Dataset d;
    d.images = Tensor::zeros({n, 1, h, w});
    for (std::size_t i = 0; i < pixels.size(); ++i)
        d.images[i] = static_cast<double>(pixels[i]) / 255.0;
    d.labels.assign(raw.begin(), raw.end());
    int mx = 0;
    for (int l : d.labels) mx = std::max(mx, l);
    d.num_classes = static_cast<std::size_t>(mx) + 1;
    return d;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
    if (spec.classes < 2 || spec.samples == 0)
        throw std::invalid_argument("make_synthetic: need >= 2 classes and > 0 samples");
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Each class is a fixed sum of Gaussian bumps; samples add pixel noise.
    const std::size_t bumps = 3;
    struct Bump {
        double cy, cx, sigma, amp;
    };
    std::vector<std::vector<Bump>> prototypes(spec.classes);
    for (auto& proto : prototypes)
        for (std::size_t b = 0; b < bumps; ++b)
            proto.push_back({unit(rng) * static_cast<double>(spec.height),
                             unit(rng) * static_cast<double>(spec.width),
                             1.0 + 2.0 * unit(rng), 0.5 + 0.5 * unit(rng)});

    Dataset d;
    d.num_classes = spec.classes;
    d.images = Tensor::zeros({spec.samples, 1, spec.height, spec.width});
    d.labels.resize(spec.samples);
    for (std::size_t i = 0; i < spec.samples; ++i) {
        const std::size_t cls = i % spec.classes;
        d.labels[i] = static_cast<int>(cls);
        for (std::size_t y = 0; y < spec.height; ++y)
            for (std::size_t x = 0; x < spec.width; ++x) {
                double v = 0.0;
                for (const Bump& b : prototypes[cls]) {
                    const double dy = (static_cast<double>(y) - b.cy) / b.sigma;
                    const double dx = (static_cast<double>(x) - b.cx) / b.sigma;
                    v += b.amp * std::exp(-0.5 * (dy * dy + dx * dx));
                }
                v += spec.noise * gauss(rng);
                d.images.at4(i, 0, y, x) = std::clamp(v, 0.0, 1.0);
            }
    }
    return d;
}

}  // namespace oscqat
