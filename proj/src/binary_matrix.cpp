#include "d2i/binary_matrix.hpp"

#include <bit>
#include <stdexcept>

namespace d2i {

BinaryMatrix::BinaryMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), words_per_row_((cols + 63) / 64), words_(rows * words_per_row_, 0) {}

BinaryMatrix BinaryMatrix::from_strings(std::initializer_list<std::string> rows) {
  return from_strings(std::vector<std::string>(rows));
}

BinaryMatrix BinaryMatrix::from_strings(const std::vector<std::string>& rows) {
  if (rows.empty()) return {};
  BinaryMatrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m.cols_) throw std::invalid_argument("ragged rows in BinaryMatrix");
    for (std::size_t j = 0; j < m.cols_; ++j) {
      const char c = rows[i][j];
      if (c != '0' && c != '1') throw std::invalid_argument("BinaryMatrix entries must be 0 or 1");
      if (c == '1') m.set(i, j, true);
    }
  }
  return m;
}

void BinaryMatrix::set(std::size_t i, std::size_t j, bool value) {
  Word& w = words_[i * words_per_row_ + j / 64];
  const Word bit = Word{1} << (j % 64);
  w = value ? (w | bit) : (w & ~bit);
}

std::string BinaryMatrix::row_string(std::size_t i) const {
  std::string s(cols_, '0');
  for (std::size_t j = 0; j < cols_; ++j)
    if ((*this)(i, j)) s[j] = '1';
  return s;
}

std::size_t BinaryMatrix::count_ones() const {
  std::size_t n = 0;
  for (Word w : words_) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

std::size_t BinaryMatrix::row_count(std::size_t i) const {
  std::size_t n = 0;
  for (Word w : row_words(i)) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

std::vector<std::size_t> BinaryMatrix::column_counts() const {
  std::vector<std::size_t> counts(cols_, 0);
  for (std::size_t i = 0; i < rows_; ++i) {
    auto r = row_words(i);
    for (std::size_t w = 0; w < words_per_row_; ++w) {
      Word bits = r[w];
      while (bits) {
        const int b = std::countr_zero(bits);
        ++counts[w * 64 + static_cast<std::size_t>(b)];
        bits &= bits - 1;
      }
    }
  }
  return counts;
}

Eigen::VectorXd BinaryMatrix::column_prevalence() const {
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cols_));
  if (rows_ == 0) return prev;
  const auto counts = column_counts();
  for (std::size_t j = 0; j < cols_; ++j)
    prev[static_cast<Eigen::Index>(j)] = static_cast<double>(counts[j]) / static_cast<double>(rows_);
  return prev;
}

Eigen::VectorXd BinaryMatrix::row_prevalence() const {
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows_));
  if (cols_ == 0) return prev;
  for (std::size_t i = 0; i < rows_; ++i)
    prev[static_cast<Eigen::Index>(i)] = static_cast<double>(row_count(i)) / static_cast<double>(cols_);
  return prev;
}

BinaryMatrix BinaryMatrix::select_rows(std::span<const std::size_t> indices) const {
  BinaryMatrix out(indices.size(), cols_);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= rows_) throw std::out_of_range("select_rows: row index out of range");
    auto src = row_words(indices[k]);
    std::copy(src.begin(), src.end(), out.row_words(k).begin());
  }
  return out;
}

BinaryMatrix BinaryMatrix::row_range(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows_) throw std::out_of_range("row_range out of bounds");
  BinaryMatrix out(end - begin, cols_);
  std::copy(words_.begin() + static_cast<std::ptrdiff_t>(begin * words_per_row_),
            words_.begin() + static_cast<std::ptrdiff_t>(end * words_per_row_), out.words_.begin());
  return out;
}

BinaryMatrix BinaryMatrix::with_zeroed_column(std::size_t col) const {
  if (col >= cols_) throw std::out_of_range("with_zeroed_column: column out of range");
  BinaryMatrix out = *this;
  for (std::size_t i = 0; i < rows_; ++i) out.set(i, col, false);
  return out;
}

BinaryMatrix BinaryMatrix::permute_columns(std::span<const std::size_t> perm) const {
  if (perm.size() != cols_) throw std::invalid_argument("permute_columns: permutation length");
  BinaryMatrix out(rows_, cols_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t k = 0; k < cols_; ++k)
      if ((*this)(i, perm[k])) out.set(i, k, true);
  return out;
}

bool BinaryMatrix::is_subset_of(const BinaryMatrix& other) const {
  if (rows_ != other.rows_ || cols_ != other.cols_) return false;
  for (std::size_t k = 0; k < words_.size(); ++k)
    if (words_[k] & ~other.words_[k]) return false;
  return true;
}

std::size_t hamming_distance(const BinaryMatrix& a, std::size_t i, const BinaryMatrix& b,
                             std::size_t j) {
  auto ra = a.row_words(i);
  auto rb = b.row_words(j);
  std::size_t d = 0;
  for (std::size_t w = 0; w < ra.size(); ++w) d += static_cast<std::size_t>(std::popcount(ra[w] ^ rb[w]));
  return d;
}

}  // namespace d2i
