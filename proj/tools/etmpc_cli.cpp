#include <cstdio>

int main() {
  std::puts("etmpc: command-line interface not yet wired");
  return 1;
}
