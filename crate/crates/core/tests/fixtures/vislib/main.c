int b_api(int x);

int main(void) { return b_api(1) == 4 ? 0 : 1; }
