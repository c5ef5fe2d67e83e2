#include <cstdio>

int main() {
  std::fprintf(stderr, "acceptance: not yet implemented\n");
  return 1;
}
