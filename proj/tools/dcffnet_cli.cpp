// Command-line entry point. Subcommands are filled in alongside the library.

#include <cstdio>

int main() {
  std::puts("dcffnet: no subcommands wired yet");
  return 1;
}
