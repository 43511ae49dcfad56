// OpenSSH auth-passwd.c
int auth_password(struct ssh *ssh, const char *password) {
    Authctxt *authctxt = ssh->authctxt;
    int result = 0;
    int ok = authctxt->valid;

    if (*password == 0 && options.permit_empty_passwd == 0)
        return 0;
    result = sys_auth_passwd(ssh, password);
    if (authctxt->force_pwchange)
        auth_restrict_session(ssh);
    return (result && ok);
}
