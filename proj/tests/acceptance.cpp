#include <cstdio>
int main(int, char**) { std::puts("FAIL acceptance suite not yet implemented"); return 1; }
